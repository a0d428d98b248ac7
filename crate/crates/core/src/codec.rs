//! Lossless palette tokenizer standing in for a VQ image tokenizer.
//!
//! A grid is encoded in row-major order, one token per cell, with the token
//! index equal to the cell's palette index. The codebook attaches a fixed
//! feature vector to every token index; those vectors are the regression
//! targets of the reconstruction loss.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::toyworld::{ImageGrid, PALETTE_SIZE};

pub const CODEBOOK_MAGIC: &[u8; 5] = b"MMCB1";
pub const DEFAULT_CODEBOOK_SEED: u64 = 0x4D4D_4342;
pub const DEFAULT_FEATURE_DIM: usize = 16;
pub const MAX_CODEBOOK_ENTRIES: usize = 64;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("palette value {value} at cell {cell} exceeds codebook size {k}")]
    PaletteOverflow { value: u8, cell: usize, k: usize },
    #[error("block length {got} != {expected}")]
    BlockLength { got: usize, expected: usize },
    #[error("token {token} at position {pos} outside codebook of size {k}")]
    TokenRange { token: u16, pos: usize, k: usize },
    #[error("invalid codebook: {0}")]
    InvalidCodebook(String),
    #[error("codebook file: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    features: Array2<f64>,
}

impl Codebook {
    /// Random unit-norm rows drawn from `seed`, rounded to f32 so that the
    /// on-disk format round-trips exactly.
    pub fn new(num_entries: usize, feature_dim: usize, seed: u64) -> Result<Self, CodecError> {
        if num_entries == 0 || num_entries > MAX_CODEBOOK_ENTRIES || feature_dim == 0 {
            return Err(CodecError::InvalidCodebook(format!(
                "K={num_entries} D'={feature_dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features = Array2::<f64>::zeros((num_entries, feature_dim));
        for mut row in features.rows_mut() {
            row.iter_mut()
                .for_each(|v| *v = StandardNormal.sample(&mut rng));
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v = (*v / norm) as f32 as f64);
        }
        Self::from_features(features)
    }

    pub fn default_palette() -> Self {
        Self::new(PALETTE_SIZE, DEFAULT_FEATURE_DIM, DEFAULT_CODEBOOK_SEED)
            .expect("default codebook is valid")
    }

    pub fn from_features(features: Array2<f64>) -> Result<Self, CodecError> {
        let k = features.nrows();
        if k == 0 || k > MAX_CODEBOOK_ENTRIES || features.ncols() == 0 {
            return Err(CodecError::InvalidCodebook(format!("shape {:?}", features.dim())));
        }
        for i in 0..k {
            for j in i + 1..k {
                let d: f64 = features
                    .row(i)
                    .iter()
                    .zip(features.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if !(d > 0.0) {
                    return Err(CodecError::InvalidCodebook(format!(
                        "rows {i} and {j} coincide"
                    )));
                }
            }
        }
        Ok(Self { features })
    }

    pub fn num_entries(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let k = self.num_entries();
        let mut best = f64::INFINITY;
        for i in 0..k {
            for j in i + 1..k {
                let d: f64 = (&self.features.row(i) - &self.features.row(j))
                    .mapv(|v| v * v)
                    .sum();
                best = best.min(d.sqrt());
            }
        }
        best
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CodecError> {
        w.write_all(CODEBOOK_MAGIC)?;
        w.write_all(&(self.num_entries() as u32).to_le_bytes())?;
        w.write_all(&(self.feature_dim() as u32).to_le_bytes())?;
        for v in self.features.iter() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CodecError> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != CODEBOOK_MAGIC {
            return Err(CodecError::InvalidCodebook("bad magic".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let k = u32::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let d = u32::from_le_bytes(word) as usize;
        if k == 0 || k > MAX_CODEBOOK_ENTRIES || d == 0 || d > 1 << 16 {
            return Err(CodecError::InvalidCodebook(format!("header K={k} D'={d}")));
        }
        let mut data = Vec::with_capacity(k * d);
        for _ in 0..k * d {
            r.read_exact(&mut word)?;
            data.push(f32::from_le_bytes(word) as f64);
        }
        let features = Array2::from_shape_vec((k, d), data).expect("length checked");
        Self::from_features(features)
    }

    pub fn save(&self, path: &Path) -> Result<(), CodecError> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self, CodecError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// Fixed-length block of codebook indices for one image.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VisualTokenBlock {
    tokens: Vec<u16>,
}

impl VisualTokenBlock {
    pub fn new(tokens: Vec<u16>, num_entries: usize) -> Result<Self, CodecError> {
        if let Some((pos, &token)) = tokens
            .iter()
            .enumerate()
            .find(|(_, &t)| t as usize >= num_entries)
        {
            return Err(CodecError::TokenRange {
                token,
                pos,
                k: num_entries,
            });
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &[u16] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn encode_image(image: &ImageGrid, num_entries: usize) -> Result<VisualTokenBlock, CodecError> {
    let tokens = image
        .cells()
        .iter()
        .enumerate()
        .map(|(cell, &value)| {
            if (value as usize) < num_entries {
                Ok(value as u16)
            } else {
                Err(CodecError::PaletteOverflow {
                    value,
                    cell,
                    k: num_entries,
                })
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(VisualTokenBlock { tokens })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub image: ImageGrid,
    /// Set when some token had no palette color and was mapped to background.
    pub lossy: bool,
}

pub fn decode_tokens(block: &VisualTokenBlock, canvas_size: usize) -> Result<Decoded, CodecError> {
    let expected = canvas_size * canvas_size;
    if block.len() != expected {
        return Err(CodecError::BlockLength {
            got: block.len(),
            expected,
        });
    }
    let mut lossy = false;
    let cells = block
        .tokens
        .iter()
        .map(|&t| {
            if (t as usize) < PALETTE_SIZE {
                t as u8
            } else {
                lossy = true;
                0
            }
        })
        .collect();
    let image = ImageGrid::from_cells(canvas_size, cells).expect("palette-checked cells");
    Ok(Decoded { image, lossy })
}

/// Gathers `cb.features[token]` for every position of the block (T×D′).
pub fn codebook_features(block: &VisualTokenBlock, cb: &Codebook) -> Array2<f64> {
    let mut out = Array2::zeros((block.len(), cb.feature_dim()));
    for (mut row, &t) in out.rows_mut().into_iter().zip(&block.tokens) {
        row.assign(&cb.features.row(t as usize));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyworld::Color;

    #[test]
    fn blank_grid_encodes_to_zeros() {
        let block = encode_image(&ImageGrid::blank(8), PALETTE_SIZE).unwrap();
        assert_eq!(block.tokens(), &[0u16; 64][..]);
        let back = decode_tokens(&block, 8).unwrap();
        assert_eq!(back.image, ImageGrid::blank(8));
        assert!(!back.lossy);
    }

    #[test]
    fn raster_order() {
        let mut g = ImageGrid::blank(8);
        g.set(0, 0, Color::Red.index());
        let block = encode_image(&g, PALETTE_SIZE).unwrap();
        assert_eq!(block.tokens()[0], 1);
        assert!(block.tokens()[1..].iter().all(|&t| t == 0));
    }

    #[test]
    fn wrong_length_rejected() {
        let block = VisualTokenBlock::new(vec![0; 63], PALETTE_SIZE).unwrap();
        let err = decode_tokens(&block, 8).unwrap_err();
        assert!(err.to_string().starts_with("block length"));
    }

    #[test]
    fn palette_overflow_and_lossy_decode() {
        let mut g = ImageGrid::blank(4);
        g.set(1, 1, 8);
        assert!(matches!(
            encode_image(&g, 4),
            Err(CodecError::PaletteOverflow { value: 8, cell: 5, k: 4 })
        ));
        let block = VisualTokenBlock::new(vec![12; 16], 16).unwrap();
        let dec = decode_tokens(&block, 4).unwrap();
        assert!(dec.lossy);
        assert_eq!(dec.image, ImageGrid::blank(4));
    }

    #[test]
    fn features_gather() {
        let cb = Codebook::default_palette();
        let zeros = VisualTokenBlock::new(vec![0; 64], 9).unwrap();
        let f = codebook_features(&zeros, &cb);
        assert_eq!(f.dim(), (64, DEFAULT_FEATURE_DIM));
        assert!(f.rows().into_iter().all(|r| r == cb.features().row(0)));

        let mut toks = vec![0; 64];
        toks[0] = 1;
        let f = codebook_features(&VisualTokenBlock::new(toks, 9).unwrap(), &cb);
        assert_eq!(f.row(0), cb.features().row(1));
        assert!(f.rows().into_iter().skip(1).all(|r| r == cb.features().row(0)));
    }

    #[test]
    fn codebook_rows_unit_norm_and_distinct() {
        let cb = Codebook::default_palette();
        for row in cb.features().rows() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert!(cb.min_pairwise_distance() > 0.0);
        assert_eq!(cb, Codebook::default_palette());
    }

    #[test]
    fn codebook_file_round_trip() {
        let cb = Codebook::new(12, 5, 7).unwrap();
        let mut buf = Vec::new();
        cb.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..5], b"MMCB1");
        assert_eq!(buf.len(), 5 + 8 + 12 * 5 * 4);
        let back = Codebook::read_from(&buf[..]).unwrap();
        assert_eq!(back, cb);
    }

    #[test]
    fn duplicate_rows_rejected() {
        let f = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(Codebook::from_features(f).is_err());
    }
}
