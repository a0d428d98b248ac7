//! The synthetic shapes world: scene specs, deterministic rendering, template
//! descriptions, an exact detector and a GenEval-style category scorer.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_CANVAS: usize = 8;
pub const MAX_OBJECTS: usize = 4;
/// Background plus the eight object colors.
pub const PALETTE_SIZE: usize = 9;

/// RGB for each palette index; index 0 is the background.
pub const PALETTE_RGB: [[u8; 3]; PALETTE_SIZE] = [
    [20, 20, 24],
    [220, 40, 40],
    [240, 140, 30],
    [240, 220, 40],
    [50, 180, 70],
    [40, 200, 210],
    [40, 80, 220],
    [150, 60, 200],
    [240, 120, 180],
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SceneError {
    #[error("empty scene")]
    EmptyScene,
    #[error("too many objects: {0} (max {MAX_OBJECTS})")]
    TooManyObjects(usize),
    #[error("canvas size {0} out of range")]
    BadCanvas(usize),
    #[error("object {0} out of bounds")]
    OutOfBounds(usize),
    #[error("overlapping objects {0} and {1}")]
    Overlap(usize, usize),
    #[error("relation {0} references a missing object")]
    BadRelationIndex(usize),
    #[error("inconsistent relation {0}")]
    InconsistentRelation(usize),
    #[error("grid has {got} cells, expected {expected}")]
    GridSize { got: usize, expected: usize },
    #[error("cell value {0} outside the palette")]
    BadCell(u8),
    #[error("category {category} not applicable to this target")]
    NotApplicable { category: GenevalCategory },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            Shape::Circle => "circles",
            Shape::Square => "squares",
            Shape::Triangle => "triangles",
            Shape::Cross => "crosses",
        }
    }

    pub fn from_word(w: &str) -> Option<Shape> {
        Shape::ALL
            .into_iter()
            .find(|s| s.word() == w || s.plural() == w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Orange,
    Yellow,
    Green,
    Cyan,
    Blue,
    Purple,
    Pink,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Orange,
        Color::Yellow,
        Color::Green,
        Color::Cyan,
        Color::Blue,
        Color::Purple,
        Color::Pink,
    ];

    /// Palette index, 1..=8.
    pub fn index(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_index(i: u8) -> Option<Color> {
        if (1..=8).contains(&i) {
            Some(Color::ALL[i as usize - 1])
        } else {
            None
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Orange => "orange",
            Color::Yellow => "yellow",
            Color::Green => "green",
            Color::Cyan => "cyan",
            Color::Blue => "blue",
            Color::Purple => "purple",
            Color::Pink => "pink",
        }
    }

    pub fn from_word(w: &str) -> Option<Color> {
        Color::ALL.into_iter().find(|c| c.word() == w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub const ALL: [Relation; 4] = [
        Relation::LeftOf,
        Relation::RightOf,
        Relation::Above,
        Relation::Below,
    ];

    pub fn phrase(self) -> &'static str {
        match self {
            Relation::LeftOf => "to the left of",
            Relation::RightOf => "to the right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    /// Strict box separation along the relation's axis.
    pub fn holds(self, subject: BoxRect, object: BoxRect) -> bool {
        match self {
            Relation::LeftOf => subject.col_max() < object.col,
            Relation::RightOf => object.col_max() < subject.col,
            Relation::Above => subject.row_max() < object.row,
            Relation::Below => object.row_max() < subject.row,
        }
    }
}

/// Axis-aligned cell rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoxRect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl BoxRect {
    pub fn row_max(&self) -> usize {
        self.row + self.height - 1
    }

    pub fn col_max(&self) -> usize {
        self.col + self.width - 1
    }

    /// True when the two boxes share a cell or touch (including diagonally).
    pub fn touches(&self, other: &BoxRect) -> bool {
        let rows = self.row <= other.row_max() + 1 && other.row <= self.row_max() + 1;
        let cols = self.col <= other.col_max() + 1 && other.col <= self.col_max() + 1;
        rows && cols
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: Color,
    pub anchor_cell: (usize, usize),
    /// Size class, 1 or 2.
    pub extent: u8,
}

impl ObjectSpec {
    pub fn new(shape: Shape, color: Color, row: usize, col: usize, extent: u8) -> Self {
        Self {
            shape,
            color,
            anchor_cell: (row, col),
            extent,
        }
    }

    pub fn stencil(&self) -> Option<&'static Stencil> {
        stencil(self.shape, self.extent)
    }

    pub fn bbox(&self) -> Option<BoxRect> {
        let st = self.stencil()?;
        Some(BoxRect {
            row: self.anchor_cell.0,
            col: self.anchor_cell.1,
            height: st.height(),
            width: st.width(),
        })
    }

    pub fn key(&self) -> (Shape, Color) {
        (self.shape, self.color)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RelationSpec {
    pub subject: usize,
    pub relation: Relation,
    pub object: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub canvas_size: usize,
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub relations: Vec<RelationSpec>,
}

impl SceneSpec {
    pub fn new(
        canvas_size: usize,
        objects: Vec<ObjectSpec>,
        relations: Vec<RelationSpec>,
    ) -> Result<Self, SceneError> {
        let spec = Self {
            canvas_size,
            objects,
            relations,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if !(2..=64).contains(&self.canvas_size) {
            return Err(SceneError::BadCanvas(self.canvas_size));
        }
        if self.objects.is_empty() {
            return Err(SceneError::EmptyScene);
        }
        if self.objects.len() > MAX_OBJECTS {
            return Err(SceneError::TooManyObjects(self.objects.len()));
        }
        let mut boxes = Vec::with_capacity(self.objects.len());
        for (i, obj) in self.objects.iter().enumerate() {
            let bb = obj.bbox().ok_or(SceneError::OutOfBounds(i))?;
            if bb.row_max() >= self.canvas_size || bb.col_max() >= self.canvas_size {
                return Err(SceneError::OutOfBounds(i));
            }
            boxes.push(bb);
        }
        for i in 0..boxes.len() {
            for j in i + 1..boxes.len() {
                if boxes[i].touches(&boxes[j]) {
                    return Err(SceneError::Overlap(i, j));
                }
            }
        }
        for (k, rel) in self.relations.iter().enumerate() {
            if rel.subject >= boxes.len() || rel.object >= boxes.len() || rel.subject == rel.object
            {
                return Err(SceneError::BadRelationIndex(k));
            }
            if !rel.relation.holds(boxes[rel.subject], boxes[rel.object]) {
                return Err(SceneError::InconsistentRelation(k));
            }
        }
        Ok(())
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("scene spec serializes")
    }
}

/// A shape's cell pattern inside its bounding box.
#[derive(Debug)]
pub struct Stencil {
    pub shape: Shape,
    pub extent: u8,
    rows: &'static [&'static str],
}

impl Stencil {
    pub fn height(&self) -> usize {
        self.rows.len()
    }

    pub fn width(&self) -> usize {
        self.rows[0].len()
    }

    pub fn filled(&self, r: usize, c: usize) -> bool {
        self.rows[r].as_bytes()[c] == b'#'
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.height())
            .flat_map(move |r| (0..self.width()).map(move |c| (r, c)))
            .filter(|&(r, c)| self.filled(r, c))
    }
}

pub static STENCILS: [Stencil; 8] = [
    Stencil { shape: Shape::Square, extent: 1, rows: &["#"] },
    Stencil { shape: Shape::Square, extent: 2, rows: &["##", "##"] },
    Stencil { shape: Shape::Triangle, extent: 1, rows: &["#.", "##"] },
    Stencil { shape: Shape::Triangle, extent: 2, rows: &["#..", "##.", "###"] },
    Stencil { shape: Shape::Circle, extent: 1, rows: &[".#.", "#.#", ".#."] },
    Stencil { shape: Shape::Circle, extent: 2, rows: &[".##.", "#..#", "#..#", ".##."] },
    Stencil { shape: Shape::Cross, extent: 1, rows: &[".#.", "###", ".#."] },
    Stencil {
        shape: Shape::Cross,
        extent: 2,
        rows: &["..#..", "..#..", "#####", "..#..", "..#.."],
    },
];

pub fn stencil(shape: Shape, extent: u8) -> Option<&'static Stencil> {
    STENCILS
        .iter()
        .find(|s| s.shape == shape && s.extent == extent)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageGrid {
    size: usize,
    cells: Vec<u8>,
}

impl ImageGrid {
    pub fn blank(size: usize) -> Self {
        Self {
            size,
            cells: vec![0; size * size],
        }
    }

    pub fn from_cells(size: usize, cells: Vec<u8>) -> Result<Self, SceneError> {
        if cells.len() != size * size {
            return Err(SceneError::GridSize {
                got: cells.len(),
                expected: size * size,
            });
        }
        if let Some(&bad) = cells.iter().find(|&&v| v as usize >= PALETTE_SIZE) {
            return Err(SceneError::BadCell(bad));
        }
        Ok(Self { size, cells })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.cells[row * self.size + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        self.cells[row * self.size + col] = value;
    }

    /// Cell-wise overlay: nonbackground cells of `other` win.
    pub fn overlay(&self, other: &ImageGrid) -> ImageGrid {
        let cells = self
            .cells
            .iter()
            .zip(&other.cells)
            .map(|(&a, &b)| if b != 0 { b } else { a })
            .collect();
        ImageGrid {
            size: self.size,
            cells,
        }
    }

    /// RGB8 raster with `scale`×`scale` pixels per cell.
    pub fn to_rgb(&self, scale: usize) -> Vec<u8> {
        let side = self.size * scale;
        let mut out = Vec::with_capacity(side * side * 3);
        for y in 0..side {
            for x in 0..side {
                let v = self.get(y / scale, x / scale) as usize;
                out.extend_from_slice(&PALETTE_RGB[v]);
            }
        }
        out
    }
}

impl fmt::Display for ImageGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..self.size {
            for c in 0..self.size {
                match self.get(r, c) {
                    0 => write!(f, ".")?,
                    v => write!(f, "{v}")?,
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

pub fn render_scene(spec: &SceneSpec) -> Result<ImageGrid, SceneError> {
    spec.validate()?;
    let mut grid = ImageGrid::blank(spec.canvas_size);
    for obj in &spec.objects {
        let st = obj.stencil().expect("validated");
        let (r0, c0) = obj.anchor_cell;
        for (r, c) in st.cells() {
            grid.set(r0 + r, c0 + c, obj.color.index());
        }
    }
    Ok(grid)
}

/// Knobs for drawing random valid scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSampler {
    pub canvas_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Probability that a multi-object scene carries one declared relation.
    pub relation_prob: f64,
    pub extents: Vec<u8>,
}

impl Default for SceneSampler {
    fn default() -> Self {
        Self {
            canvas_size: DEFAULT_CANVAS,
            min_objects: 1,
            max_objects: MAX_OBJECTS,
            relation_prob: 0.5,
            extents: vec![1, 2],
        }
    }
}

impl SceneSampler {
    pub fn with_objects(mut self, min: usize, max: usize) -> Self {
        self.min_objects = min;
        self.max_objects = max;
        self
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SceneSpec {
        let n = rng.random_range(self.min_objects..=self.max_objects);
        'outer: loop {
            let mut objects: Vec<ObjectSpec> = Vec::with_capacity(n);
            for _ in 0..n {
                let mut placed = false;
                for _ in 0..64 {
                    let shape = Shape::ALL[rng.random_range(0..4)];
                    let color = Color::ALL[rng.random_range(0..8)];
                    let extent = self.extents[rng.random_range(0..self.extents.len())];
                    let st = stencil(shape, extent).expect("known stencil");
                    if st.height() > self.canvas_size || st.width() > self.canvas_size {
                        continue;
                    }
                    let row = rng.random_range(0..=self.canvas_size - st.height());
                    let col = rng.random_range(0..=self.canvas_size - st.width());
                    let cand = ObjectSpec::new(shape, color, row, col, extent);
                    let bb = cand.bbox().expect("known stencil");
                    if objects.iter().all(|o| !o.bbox().unwrap().touches(&bb)) {
                        objects.push(cand);
                        placed = true;
                        break;
                    }
                }
                if !placed {
                    continue 'outer;
                }
            }
            let mut relations = Vec::new();
            if n >= 2 && rng.random_bool(self.relation_prob) {
                let a = rng.random_range(0..n);
                let mut b = rng.random_range(0..n - 1);
                if b >= a {
                    b += 1;
                }
                let (subject, object) = (a.min(b), a.max(b));
                let (sb, ob) = (objects[subject].bbox().unwrap(), objects[object].bbox().unwrap());
                let holding: Vec<Relation> = Relation::ALL
                    .into_iter()
                    .filter(|r| r.holds(sb, ob))
                    .collect();
                if !holding.is_empty() {
                    relations.push(RelationSpec {
                        subject,
                        relation: holding[rng.random_range(0..holding.len())],
                        object,
                    });
                }
            }
            return SceneSpec::new(self.canvas_size, objects, relations)
                .expect("sampler builds valid scenes");
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescribeStyle {
    Plain,
    Relational,
}

fn count_word(n: usize) -> &'static str {
    match n {
        1 => "a",
        2 => "two",
        3 => "three",
        4 => "four",
        _ => unreachable!("at most {MAX_OBJECTS} objects"),
    }
}

fn group_phrases(objects: &[&ObjectSpec]) -> Vec<String> {
    let mut order: Vec<(Color, Shape)> = Vec::new();
    let mut counts: BTreeMap<(Color, Shape), usize> = BTreeMap::new();
    for o in objects {
        let key = (o.color, o.shape);
        if !counts.contains_key(&key) {
            order.push(key);
        }
        *counts.entry(key).or_default() += 1;
    }
    order
        .into_iter()
        .map(|key @ (color, shape)| {
            let n = counts[&key];
            let noun = if n == 1 { shape.word() } else { shape.plural() };
            format!("{} {} {}", count_word(n), color.word(), noun)
        })
        .collect()
}

pub fn describe_scene(spec: &SceneSpec, style: DescribeStyle) -> Result<String, SceneError> {
    spec.validate()?;
    let all: Vec<&ObjectSpec> = spec.objects.iter().collect();
    if style == DescribeStyle::Plain || spec.relations.is_empty() {
        return Ok(group_phrases(&all).join(" and "));
    }
    let mut mentioned = vec![false; spec.objects.len()];
    let mut clauses = Vec::new();
    for rel in &spec.relations {
        let s = &spec.objects[rel.subject];
        let o = &spec.objects[rel.object];
        mentioned[rel.subject] = true;
        mentioned[rel.object] = true;
        clauses.push(format!(
            "a {} {} {} a {} {}",
            s.color.word(),
            s.shape.word(),
            rel.relation.phrase(),
            o.color.word(),
            o.shape.word()
        ));
    }
    let rest: Vec<&ObjectSpec> = spec
        .objects
        .iter()
        .zip(&mentioned)
        .filter(|(_, &m)| !m)
        .map(|(o, _)| o)
        .collect();
    clauses.extend(group_phrases(&rest));
    Ok(clauses.join(" and "))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectedObject {
    pub shape: Shape,
    pub color: Color,
    pub anchor_cell: (usize, usize),
    pub extent: u8,
}

impl DetectedObject {
    pub fn bbox(&self) -> BoxRect {
        let st = stencil(self.shape, self.extent).expect("detected stencils exist");
        BoxRect {
            row: self.anchor_cell.0,
            col: self.anchor_cell.1,
            height: st.height(),
            width: st.width(),
        }
    }

    pub fn key(&self) -> (Shape, Color) {
        (self.shape, self.color)
    }
}

/// A connected component that matches no stencil.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Blob {
    pub color: u8,
    pub cells: usize,
    pub anchor_cell: (usize, usize),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectedScene {
    pub objects: Vec<DetectedObject>,
    pub blobs: Vec<Blob>,
}

impl DetectedScene {
    pub fn is_empty(&self) -> bool {
        self.objects.is_empty() && self.blobs.is_empty()
    }
}

/// Same-color 8-connected components, each matched exactly against the stencil table.
pub fn detect_objects(image: &ImageGrid) -> DetectedScene {
    let n = image.size();
    let mut seen = vec![false; n * n];
    let mut out = DetectedScene::default();
    let mut stack = Vec::new();
    for start in 0..n * n {
        let color = image.cells()[start];
        if color == 0 || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut comp = Vec::new();
        while let Some(idx) = stack.pop() {
            comp.push(idx);
            let (r, c) = ((idx / n) as isize, (idx % n) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr < 0 || cc < 0 || rr >= n as isize || cc >= n as isize {
                        continue;
                    }
                    let j = rr as usize * n + cc as usize;
                    if !seen[j] && image.cells()[j] == color {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        let r0 = comp.iter().map(|i| i / n).min().unwrap();
        let r1 = comp.iter().map(|i| i / n).max().unwrap();
        let c0 = comp.iter().map(|i| i % n).min().unwrap();
        let c1 = comp.iter().map(|i| i % n).max().unwrap();
        let (h, w) = (r1 - r0 + 1, c1 - c0 + 1);
        let in_comp = |r: usize, c: usize| comp.contains(&((r0 + r) * n + c0 + c));
        let matched = STENCILS.iter().find(|st| {
            st.height() == h
                && st.width() == w
                && (0..h).all(|r| (0..w).all(|c| st.filled(r, c) == in_comp(r, c)))
        });
        match (matched, Color::from_index(color)) {
            (Some(st), Some(col)) => out.objects.push(DetectedObject {
                shape: st.shape,
                color: col,
                anchor_cell: (r0, c0),
                extent: st.extent,
            }),
            _ => out.blobs.push(Blob {
                color,
                cells: comp.len(),
                anchor_cell: (r0, c0),
            }),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GenevalCategory {
    SingleObj,
    TwoObj,
    Counting,
    Colors,
    Position,
    ColorAttri,
}

impl GenevalCategory {
    pub const ALL: [GenevalCategory; 6] = [
        GenevalCategory::SingleObj,
        GenevalCategory::TwoObj,
        GenevalCategory::Counting,
        GenevalCategory::Colors,
        GenevalCategory::Position,
        GenevalCategory::ColorAttri,
    ];

    /// Column header as printed in result tables.
    pub fn label(self) -> &'static str {
        match self {
            GenevalCategory::SingleObj => "Single Obj.",
            GenevalCategory::TwoObj => "Two Obj.",
            GenevalCategory::Counting => "Counting",
            GenevalCategory::Colors => "Colors",
            GenevalCategory::Position => "Position",
            GenevalCategory::ColorAttri => "Color Attri.",
        }
    }

    /// Whether `target` is a prompt this category scores.
    pub fn applies_to(self, target: &SceneSpec) -> bool {
        let n = target.objects.len();
        match self {
            GenevalCategory::SingleObj => n == 1,
            GenevalCategory::TwoObj => n == 2,
            GenevalCategory::Counting => Shape::ALL
                .iter()
                .any(|s| target.objects.iter().filter(|o| o.shape == *s).count() >= 2),
            GenevalCategory::Colors => true,
            GenevalCategory::Position => !target.relations.is_empty(),
            GenevalCategory::ColorAttri => {
                let first = target.objects[0].color;
                n >= 2 && target.objects.iter().any(|o| o.color != first)
            }
        }
    }

    pub fn applicable(target: &SceneSpec) -> Vec<GenevalCategory> {
        Self::ALL
            .into_iter()
            .filter(|c| c.applies_to(target))
            .collect()
    }
}

impl fmt::Display for GenevalCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

fn multiset<K: Ord, I: IntoIterator<Item = K>>(items: I) -> BTreeMap<K, usize> {
    let mut m = BTreeMap::new();
    for k in items {
        *m.entry(k).or_insert(0) += 1;
    }
    m
}

/// 1 when the detection satisfies `target` under `category`, else 0.
pub fn score_geneval(
    detected: &DetectedScene,
    target: &SceneSpec,
    category: GenevalCategory,
) -> Result<u8, SceneError> {
    if !category.applies_to(target) {
        return Err(SceneError::NotApplicable { category });
    }
    let found = &detected.objects;
    let ok = match category {
        GenevalCategory::SingleObj | GenevalCategory::TwoObj => {
            multiset(found.iter().map(|o| o.key())) == multiset(target.objects.iter().map(|o| o.key()))
        }
        GenevalCategory::Counting => Shape::ALL.iter().all(|s| {
            let want = target.objects.iter().filter(|o| o.shape == *s).count();
            want == 0 || found.iter().filter(|o| o.shape == *s).count() == want
        }),
        GenevalCategory::Colors => {
            multiset(found.iter().map(|o| o.color)) == multiset(target.objects.iter().map(|o| o.color))
        }
        GenevalCategory::Position => target.relations.iter().all(|rel| {
            let s = target.objects[rel.subject].key();
            let o = target.objects[rel.object].key();
            found.iter().enumerate().any(|(i, a)| {
                a.key() == s
                    && found.iter().enumerate().any(|(j, b)| {
                        i != j && b.key() == o && rel.relation.holds(a.bbox(), b.bbox())
                    })
            })
        }),
        GenevalCategory::ColorAttri => {
            let have = multiset(found.iter().map(|o| o.key()));
            multiset(target.objects.iter().map(|o| o.key()))
                .iter()
                .all(|(k, n)| have.get(k).copied().unwrap_or(0) >= *n)
        }
    };
    Ok(ok as u8)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn red_square_at(r: usize, c: usize) -> ObjectSpec {
        ObjectSpec::new(Shape::Square, Color::Red, r, c, 1)
    }

    #[test]
    fn stencils_are_unique_and_connected() {
        for (i, a) in STENCILS.iter().enumerate() {
            for b in &STENCILS[i + 1..] {
                let same = a.height() == b.height()
                    && a.width() == b.width()
                    && a.cells().eq(b.cells());
                assert!(!same, "{:?}/{} vs {:?}/{}", a.shape, a.extent, b.shape, b.extent);
            }
            // no stencil is a horizontal domino, which serves as the canonical blob
            assert!(!(a.height() == 1 && a.width() == 2));
        }
    }

    #[test]
    fn empty_scene_rejected() {
        let err = SceneSpec::new(8, vec![], vec![]).unwrap_err();
        assert_eq!(err.to_string(), "empty scene");
    }

    #[test]
    fn single_cell_square() {
        let spec = SceneSpec::new(8, vec![red_square_at(2, 3)], vec![]).unwrap();
        let grid = render_scene(&spec).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let want = if (r, c) == (2, 3) { Color::Red.index() } else { 0 };
                assert_eq!(grid.get(r, c), want);
            }
        }
    }

    #[test]
    fn violated_relation_rejected() {
        let objs = vec![
            red_square_at(0, 6),
            ObjectSpec::new(Shape::Circle, Color::Blue, 4, 0, 1),
        ];
        let rel = RelationSpec {
            subject: 0,
            relation: Relation::LeftOf,
            object: 1,
        };
        let err = SceneSpec::new(8, objs, vec![rel]).unwrap_err();
        assert!(err.to_string().starts_with("inconsistent relation"));
    }

    #[test]
    fn out_of_bounds_and_overlap() {
        let big = ObjectSpec::new(Shape::Cross, Color::Green, 4, 4, 2);
        assert_eq!(
            SceneSpec::new(8, vec![big], vec![]).unwrap_err(),
            SceneError::OutOfBounds(0)
        );
        let a = red_square_at(1, 1);
        let b = red_square_at(2, 2);
        assert_eq!(
            SceneSpec::new(8, vec![a, b], vec![]).unwrap_err(),
            SceneError::Overlap(0, 1)
        );
    }

    #[test]
    fn describe_templates() {
        let one = SceneSpec::new(8, vec![red_square_at(0, 0)], vec![]).unwrap();
        assert_eq!(describe_scene(&one, DescribeStyle::Plain).unwrap(), "a red square");

        let two = SceneSpec::new(
            8,
            vec![red_square_at(3, 0), ObjectSpec::new(Shape::Circle, Color::Blue, 3, 4, 1)],
            vec![RelationSpec {
                subject: 0,
                relation: Relation::LeftOf,
                object: 1,
            }],
        )
        .unwrap();
        assert_eq!(
            describe_scene(&two, DescribeStyle::Relational).unwrap(),
            "a red square to the left of a blue circle"
        );
        assert_eq!(
            describe_scene(&two, DescribeStyle::Plain).unwrap(),
            "a red square and a blue circle"
        );

        let tri = |r, c| ObjectSpec::new(Shape::Triangle, Color::Green, r, c, 1);
        let three = SceneSpec::new(8, vec![tri(0, 0), tri(0, 4), tri(5, 2)], vec![]).unwrap();
        assert_eq!(
            describe_scene(&three, DescribeStyle::Plain).unwrap(),
            "three green triangles"
        );
    }

    #[test]
    fn detect_empty_and_blob() {
        let grid = ImageGrid::blank(8);
        assert!(detect_objects(&grid).is_empty());

        let mut stray = ImageGrid::blank(8);
        stray.set(4, 4, Color::Cyan.index());
        stray.set(4, 5, Color::Cyan.index());
        let det = detect_objects(&stray);
        assert!(det.objects.is_empty());
        assert_eq!(det.blobs.len(), 1);
        assert_eq!(det.blobs[0].cells, 2);
    }

    #[test]
    fn two_object_scoring() {
        let target = SceneSpec::new(
            8,
            vec![red_square_at(0, 0), ObjectSpec::new(Shape::Circle, Color::Blue, 4, 4, 1)],
            vec![],
        )
        .unwrap();
        let det = detect_objects(&render_scene(&target).unwrap());
        assert_eq!(score_geneval(&det, &target, GenevalCategory::TwoObj).unwrap(), 1);

        let only_square = SceneSpec::new(8, vec![red_square_at(0, 0)], vec![]).unwrap();
        let det = detect_objects(&render_scene(&only_square).unwrap());
        assert_eq!(score_geneval(&det, &target, GenevalCategory::TwoObj).unwrap(), 0);

        assert!(matches!(
            score_geneval(&det, &target, GenevalCategory::SingleObj),
            Err(SceneError::NotApplicable { .. })
        ));
    }

    #[test]
    fn relations_json_is_kebab_case() {
        let rel = RelationSpec {
            subject: 0,
            relation: Relation::LeftOf,
            object: 1,
        };
        let s = serde_json::to_string(&rel).unwrap();
        assert!(s.contains("\"left-of\""), "{s}");
    }
}
