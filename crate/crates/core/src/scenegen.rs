//! Synthetic aerial-grid scene pairs with known ground truth.
//!
//! Each pair is a before/after grid of (class, color) cells related by an
//! integer content shift. The overlap rectangle, planted changes, and
//! bidirectional templated captions are all recorded, so alignment and
//! captioning quality can be scored exactly.

use crate::error::{Error, Result};
use crate::tape::Elem;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{Mutex, OnceLock};

// ---------------------------------------------------------------------------
// Scene content

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Empty,
    Building,
    Car,
    Tree,
    Road,
    ParkingLot,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 6] = [
        ObjectClass::Empty,
        ObjectClass::Building,
        ObjectClass::Car,
        ObjectClass::Tree,
        ObjectClass::Road,
        ObjectClass::ParkingLot,
    ];

    pub const NON_EMPTY: [ObjectClass; 5] = [
        ObjectClass::Building,
        ObjectClass::Car,
        ObjectClass::Tree,
        ObjectClass::Road,
        ObjectClass::ParkingLot,
    ];

    pub fn token(self) -> &'static str {
        match self {
            ObjectClass::Empty => "empty",
            ObjectClass::Building => "building",
            ObjectClass::Car => "car",
            ObjectClass::Tree => "tree",
            ObjectClass::Road => "road",
            ObjectClass::ParkingLot => "parking_lot",
        }
    }

    fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Gray,
    White,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Gray,
        Color::White,
        Color::Yellow,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Gray => "gray",
            Color::White => "white",
            Color::Yellow => "yellow",
        }
    }

    fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).unwrap()
    }
}

/// One grid cell, serialized as a `[class, color]` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(ObjectClass, Color)", into = "(ObjectClass, Color)")]
pub struct Cell {
    pub class: ObjectClass,
    pub color: Color,
}

impl From<(ObjectClass, Color)> for Cell {
    fn from((class, color): (ObjectClass, Color)) -> Self {
        Cell { class, color }
    }
}

impl From<Cell> for (ObjectClass, Color) {
    fn from(c: Cell) -> Self {
        (c.class, c.color)
    }
}

/// A symbolic grid scene, cells stored row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<Cell>,
}

impl SceneSpec {
    pub fn cell(&self, row: usize, col: usize) -> Cell {
        self.cells[row * self.width + col]
    }

    pub fn cell_mut(&mut self, row: usize, col: usize) -> &mut Cell {
        &mut self.cells[row * self.width + col]
    }

    pub fn num_cells(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.len() != self.height * self.width {
            return Err(Error::Dimension(format!(
                "scene holds {} cells but declares {}x{}",
                self.cells.len(),
                self.height,
                self.width
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeKind {
    Add,
    Remove,
    Replace,
}

/// A planted scene change at a position inside the overlap rectangle
/// (before-image coordinates).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeOp {
    pub kind: ChangeKind,
    pub position: (usize, usize),
    pub before_class: ObjectClass,
    pub after_class: ObjectClass,
}

/// Axis-aligned rectangle, serialized as `[top, left, height, width]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(usize, usize, usize, usize)", into = "(usize, usize, usize, usize)")]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl From<(usize, usize, usize, usize)> for Rect {
    fn from((top, left, height, width): (usize, usize, usize, usize)) -> Self {
        Rect {
            top,
            left,
            height,
            width,
        }
    }
}

impl From<Rect> for (usize, usize, usize, usize) {
    fn from(r: Rect) -> Self {
        (r.top, r.left, r.height, r.width)
    }
}

impl Rect {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top
            && row < self.top + self.height
            && col >= self.left
            && col < self.left + self.width
    }
}

/// One before/after pair with full ground truth and paired caption
/// variants (forward index k corresponds to reverse index k).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: String,
    pub before: SceneSpec,
    pub after: SceneSpec,
    pub shift: (i64, i64),
    pub overlap_rect: Rect,
    pub changes: Vec<ChangeOp>,
    pub captions_forward: Vec<Vec<String>>,
    pub captions_reverse: Vec<Vec<String>>,
    pub seed: u64,
}

// ---------------------------------------------------------------------------
// Generation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    /// Maximum absolute content shift per axis, in cells.
    pub max_shift: i64,
    pub num_changes: usize,
    pub min_overlap_fraction: f64,
    /// Test hook: pin the shift instead of sampling it.
    #[serde(default)]
    pub forced_shift: Option<(i64, i64)>,
    /// Fraction of cells left empty (gives add-changes room to land).
    #[serde(default = "default_empty_fraction")]
    pub empty_fraction: f64,
}

fn default_empty_fraction() -> f64 {
    0.3
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            height: 8,
            width: 8,
            max_shift: 2,
            num_changes: 2,
            min_overlap_fraction: 0.4,
            forced_shift: None,
            empty_fraction: default_empty_fraction(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 {
            return Err(Error::Config(format!(
                "grid must be at least 4x4, got {}x{}",
                self.height, self.width
            )));
        }
        if self.max_shift < 0 || self.max_shift as usize >= self.height.min(self.width) {
            return Err(Error::Config(format!(
                "max_shift {} must be in [0, {})",
                self.max_shift,
                self.height.min(self.width)
            )));
        }
        if !(0.0..=1.0).contains(&self.min_overlap_fraction) {
            return Err(Error::Config(format!(
                "min_overlap_fraction {} outside [0, 1]",
                self.min_overlap_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.empty_fraction) {
            return Err(Error::Config(format!(
                "empty_fraction {} outside [0, 1]",
                self.empty_fraction
            )));
        }
        Ok(())
    }
}

/// Overlap rectangle in before-image coordinates for a content shift
/// (dy, dx): the cell at before (r, c) appears at after (r+dy, c+dx).
pub fn overlap_rect_before(height: usize, width: usize, shift: (i64, i64)) -> Rect {
    let (dy, dx) = shift;
    Rect {
        top: (-dy).max(0) as usize,
        left: (-dx).max(0) as usize,
        height: height - dy.unsigned_abs() as usize,
        width: width - dx.unsigned_abs() as usize,
    }
}

/// Overlap rectangle in after-image coordinates.
pub fn overlap_rect_after(height: usize, width: usize, shift: (i64, i64)) -> Rect {
    overlap_rect_before(height, width, (-shift.0, -shift.1))
}

fn random_cell<R: Rng>(rng: &mut R, empty_fraction: f64) -> Cell {
    let class = if rng.gen::<f64>() < empty_fraction {
        ObjectClass::Empty
    } else {
        ObjectClass::NON_EMPTY[rng.gen_range(0..ObjectClass::NON_EMPTY.len())]
    };
    let color = Color::ALL[rng.gen_range(0..Color::ALL.len())];
    Cell { class, color }
}

pub fn generate_pair(seed: u64, config: &GenConfig) -> Result<PairRecord> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (config.height, config.width);
    let total = (h * w) as f64;

    let shift = match config.forced_shift {
        Some((dy, dx)) => {
            if dy.unsigned_abs() as usize >= h || dx.unsigned_abs() as usize >= w {
                return Err(Error::Config(format!(
                    "forced shift ({dy}, {dx}) leaves no overlap on a {h}x{w} grid"
                )));
            }
            (dy, dx)
        }
        None => {
            let mut accepted = (0, 0);
            for _ in 0..100_000 {
                let dy = rng.gen_range(-config.max_shift..=config.max_shift);
                let dx = rng.gen_range(-config.max_shift..=config.max_shift);
                let area = overlap_rect_before(h, w, (dy, dx)).area() as f64;
                if area / total >= config.min_overlap_fraction {
                    accepted = (dy, dx);
                    break;
                }
            }
            accepted
        }
    };

    let rect = overlap_rect_before(h, w, shift);
    if config.num_changes > rect.area() {
        return Err(Error::Capacity {
            requested: config.num_changes,
            capacity: rect.area(),
        });
    }

    let before = SceneSpec {
        height: h,
        width: w,
        cells: (0..h * w)
            .map(|_| random_cell(&mut rng, config.empty_fraction))
            .collect(),
    };

    // Pick distinct change positions inside the overlap, row-major order.
    let mut positions: Vec<(usize, usize)> = (rect.top..rect.top + rect.height)
        .flat_map(|r| (rect.left..rect.left + rect.width).map(move |c| (r, c)))
        .collect();
    positions.shuffle(&mut rng);
    let mut chosen: Vec<(usize, usize)> = positions.into_iter().take(config.num_changes).collect();
    chosen.sort_unstable();

    let mut changes = Vec::with_capacity(config.num_changes);
    let mut after = SceneSpec {
        height: h,
        width: w,
        cells: vec![
            Cell {
                class: ObjectClass::Empty,
                color: Color::Gray,
            };
            h * w
        ],
    };
    for r in 0..h {
        for c in 0..w {
            let br = r as i64 - shift.0;
            let bc = c as i64 - shift.1;
            let cell = if br >= 0 && (br as usize) < h && bc >= 0 && (bc as usize) < w {
                before.cell(br as usize, bc as usize)
            } else {
                random_cell(&mut rng, config.empty_fraction)
            };
            *after.cell_mut(r, c) = cell;
        }
    }

    for &(r, c) in &chosen {
        let bef_cell = before.cell(r, c);
        let (kind, after_class, after_color) = if bef_cell.class == ObjectClass::Empty {
            let class = ObjectClass::NON_EMPTY[rng.gen_range(0..ObjectClass::NON_EMPTY.len())];
            let color = Color::ALL[rng.gen_range(0..Color::ALL.len())];
            (ChangeKind::Add, class, color)
        } else if rng.gen::<bool>() {
            (ChangeKind::Remove, ObjectClass::Empty, bef_cell.color)
        } else {
            let mut class =
                ObjectClass::NON_EMPTY[rng.gen_range(0..ObjectClass::NON_EMPTY.len())];
            while class == bef_cell.class {
                class = ObjectClass::NON_EMPTY[rng.gen_range(0..ObjectClass::NON_EMPTY.len())];
            }
            (ChangeKind::Replace, class, bef_cell.color)
        };
        let ar = (r as i64 + shift.0) as usize;
        let ac = (c as i64 + shift.1) as usize;
        *after.cell_mut(ar, ac) = Cell {
            class: after_class,
            color: after_color,
        };
        changes.push(ChangeOp {
            kind,
            position: (r, c),
            before_class: bef_cell.class,
            after_class,
        });
    }

    let captions_forward = build_captions(shift, &changes, &before, &after, false);
    let captions_reverse = build_captions(shift, &changes, &before, &after, true);

    Ok(PairRecord {
        pair_id: format!("pair-{seed:08x}"),
        before,
        after,
        shift,
        overlap_rect: rect,
        changes,
        captions_forward,
        captions_reverse,
        seed,
    })
}

// ---------------------------------------------------------------------------
// Captions

pub const DIRECTION_WORDS: [&str; 5] = ["left", "right", "up", "down", "static"];
pub const APPEAR_VERB: &str = "appears";
pub const DISAPPEAR_VERB: &str = "disappears";
pub const REMAIN_VERB: &str = "remains";

/// Direction word for a content shift; the dominant axis wins, ties going
/// to the horizontal axis.
pub fn direction_word(shift: (i64, i64)) -> &'static str {
    let (dy, dx) = shift;
    if dy == 0 && dx == 0 {
        "static"
    } else if dx.abs() >= dy.abs() {
        if dx > 0 {
            "right"
        } else {
            "left"
        }
    } else if dy > 0 {
        "down"
    } else {
        "up"
    }
}

pub fn antonym(dir: &str) -> &'static str {
    match dir {
        "left" => "right",
        "right" => "left",
        "up" => "down",
        "down" => "up",
        "static" => "static",
        other => panic!("not a direction word: {other}"),
    }
}

fn s(tokens: &[&str]) -> Vec<String> {
    tokens.iter().map(|t| t.to_string()).collect()
}

fn change_clause(
    change: &ChangeOp,
    shift: (i64, i64),
    before: &SceneSpec,
    after: &SceneSpec,
    reverse: bool,
) -> Vec<String> {
    let (r, c) = change.position;
    let bef_color = before.cell(r, c).color.token();
    let ar = (r as i64 + shift.0) as usize;
    let ac = (c as i64 + shift.1) as usize;
    let aft_color = after.cell(ar, ac).color.token();
    let kind = if reverse {
        match change.kind {
            ChangeKind::Add => ChangeKind::Remove,
            ChangeKind::Remove => ChangeKind::Add,
            ChangeKind::Replace => ChangeKind::Replace,
        }
    } else {
        change.kind
    };
    // The disappearing object keeps its source-image color; the appearing
    // one reads its color from the image it shows up in.
    let (old_class, old_color, new_class, new_color) = if reverse {
        (change.after_class, aft_color, change.before_class, bef_color)
    } else {
        (change.before_class, bef_color, change.after_class, aft_color)
    };
    match kind {
        ChangeKind::Add => s(&["a", new_color, new_class.token(), APPEAR_VERB]),
        ChangeKind::Remove => s(&["the", old_color, old_class.token(), DISAPPEAR_VERB]),
        ChangeKind::Replace => {
            let mut toks = s(&["the", old_color, old_class.token(), DISAPPEAR_VERB]);
            toks.extend(s(&["and", "a", new_color, new_class.token(), APPEAR_VERB]));
            toks
        }
    }
}

fn build_captions(
    shift: (i64, i64),
    changes: &[ChangeOp],
    before: &SceneSpec,
    after: &SceneSpec,
    reverse: bool,
) -> Vec<Vec<String>> {
    let dir = if reverse {
        antonym(direction_word(shift))
    } else {
        direction_word(shift)
    };
    let dir_phrase: Vec<String> = if dir == "static" {
        s(&["the", "view", "stays", "static"])
    } else {
        s(&["the", "view", "moves", dir])
    };
    let change_part: Vec<Vec<String>> = if changes.is_empty() {
        vec![s(&["everything", REMAIN_VERB, "the", "same"])]
    } else {
        changes
            .iter()
            .map(|ch| change_clause(ch, shift, before, after, reverse))
            .collect()
    };

    let joined_changes = |acc: &mut Vec<String>| {
        for (i, clause) in change_part.iter().enumerate() {
            if i > 0 {
                acc.push("and".to_string());
            }
            acc.extend(clause.iter().cloned());
        }
    };

    // Variant 0: direction first. Variant 1: changes first.
    let mut v0 = dir_phrase.clone();
    v0.push("and".to_string());
    joined_changes(&mut v0);

    let mut v1 = Vec::new();
    joined_changes(&mut v1);
    v1.push("and".to_string());
    v1.extend(dir_phrase);

    vec![v0, v1]
}

// ---------------------------------------------------------------------------
// Rendering

/// Internal seed for the fixed prototype table.
const PROTOTYPE_TABLE_SEED: u64 = 0x5ce0_e9a5_6015_fec5;
/// Cosine ceiling enforced between distinct prototypes (relaxed if a slot
/// cannot be filled, which only happens at very small d_in).
const PROTOTYPE_MAX_COS: f64 = 0.45;

fn prototype_table_f64(d_in: usize) -> Array2<f64> {
    static CACHE: OnceLock<Mutex<std::collections::HashMap<usize, Array2<f64>>>> =
        OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(std::collections::HashMap::new()));
    let mut guard = cache.lock().unwrap();
    if let Some(t) = guard.get(&d_in) {
        return t.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(PROTOTYPE_TABLE_SEED);
    let count = ObjectClass::ALL.len() * Color::ALL.len();
    let mut table = Array2::zeros((count, d_in));
    let mut ceiling = PROTOTYPE_MAX_COS;
    let mut placed = 0usize;
    let mut attempts_at_ceiling = 0usize;
    while placed < count {
        let mut v: Vec<f64> = (0..d_in).map(|_| f64::std_normal(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        let ok = (0..placed).all(|p| {
            let cos: f64 = (0..d_in).map(|j| table[[p, j]] * v[j]).sum();
            cos.abs() <= ceiling
        });
        if ok {
            for (j, x) in v.into_iter().enumerate() {
                table[[placed, j]] = x;
            }
            placed += 1;
            attempts_at_ceiling = 0;
        } else {
            attempts_at_ceiling += 1;
            if attempts_at_ceiling > 10_000 {
                ceiling = (ceiling * 1.2).min(0.99);
                attempts_at_ceiling = 0;
            }
        }
    }
    guard.insert(d_in, table.clone());
    table
}

/// Fixed per-(class, color) prototype vectors, unit norm, pairwise
/// cosine bounded away from one.
pub fn prototype_table<F: Elem>(d_in: usize) -> Array2<F> {
    prototype_table_f64(d_in).mapv(F::from_f64)
}

fn prototype_index(cell: Cell) -> usize {
    cell.class.index() * Color::ALL.len() + cell.color.index()
}

/// Render a scene to raw patch features: one row per cell, the cell's
/// prototype plus Gaussian noise of scale `noise_sigma`.
pub fn render<F: Elem>(
    scene: &SceneSpec,
    d_in: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Array2<F>> {
    if noise_sigma < 0.0 {
        return Err(Error::Config(format!(
            "noise_sigma must be nonnegative, got {noise_sigma}"
        )));
    }
    scene.validate()?;
    let table = prototype_table_f64(d_in);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = scene.num_cells();
    let mut out = Array2::zeros((n, d_in));
    for (i, &cell) in scene.cells.iter().enumerate() {
        let p = prototype_index(cell);
        for j in 0..d_in {
            let noise = f64::std_normal(&mut rng) * noise_sigma;
            out[[i, j]] = F::from_f64(table[[p, j]] + noise);
        }
    }
    Ok(out)
}

/// Render a pair with a *distinct* prototype per world cell instead of the
/// shared (class, color) table: content that is genuinely the same world
/// cell matches, everything else (exposed bands, changed cells) gets a
/// fresh vector. Used by alignment tests, where per-cell distinctiveness
/// is the stated regime.
pub fn render_distinct<F: Elem>(
    record: &PairRecord,
    d_in: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<(Array2<F>, Array2<F>)> {
    if noise_sigma < 0.0 {
        return Err(Error::Config(format!(
            "noise_sigma must be nonnegative, got {noise_sigma}"
        )));
    }
    let (h, w) = (record.before.height, record.before.width);
    let (dy, dx) = record.shift;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fresh = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let mut v: Vec<f64> = (0..d_in).map(|_| f64::std_normal(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    };

    let before_protos: Vec<Vec<f64>> = (0..h * w).map(|_| fresh(&mut rng)).collect();
    let changed: std::collections::HashSet<(usize, usize)> =
        record.changes.iter().map(|c| c.position).collect();

    let n = h * w;
    let mut bef = Array2::zeros((n, d_in));
    let mut aft = Array2::zeros((n, d_in));
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            for j in 0..d_in {
                let noise = f64::std_normal(&mut rng) * noise_sigma;
                bef[[i, j]] = F::from_f64(before_protos[i][j] + noise);
            }
        }
    }
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let br = r as i64 - dy;
            let bc = c as i64 - dx;
            let in_bounds = br >= 0 && (br as usize) < h && bc >= 0 && (bc as usize) < w;
            let proto = if in_bounds && !changed.contains(&(br as usize, bc as usize)) {
                before_protos[br as usize * w + bc as usize].clone()
            } else {
                fresh(&mut rng)
            };
            for j in 0..d_in {
                let noise = f64::std_normal(&mut rng) * noise_sigma;
                aft[[i, j]] = F::from_f64(proto[j] + noise);
            }
        }
    }
    Ok((bef, aft))
}

// ---------------------------------------------------------------------------
// Dataset I/O and splits

pub fn write_dataset(records: &[PairRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Numeric(format!("serialize failed: {e}")))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<PairRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PairRecord = serde_json::from_str(&line).map_err(|e| {
            let msg = e.to_string();
            match msg.split("missing field `").nth(1).and_then(|s| s.split('`').next()) {
                Some(field) => Error::Schema {
                    line: line_no,
                    field: field.to_string(),
                    message: msg,
                },
                None => Error::Parse {
                    line: line_no,
                    message: msg,
                },
            }
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Disjoint train/val/test index sets, deterministic in the master seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_dataset(
    records: &[PairRecord],
    val_fraction: f64,
    test_fraction: f64,
    master_seed: u64,
) -> Result<Split> {
    if val_fraction < 0.0 || test_fraction < 0.0 || val_fraction + test_fraction > 1.0 {
        return Err(Error::Config(format!(
            "invalid split fractions val={val_fraction} test={test_fraction}"
        )));
    }
    // Order by pair_id first so the assignment depends on ids, not on the
    // order records happen to be stored in.
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].pair_id.cmp(&records[b].pair_id));
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    order.shuffle(&mut rng);
    let n = records.len();
    let n_val = (n as f64 * val_fraction).round() as usize;
    let n_test = (n as f64 * test_fraction).round() as usize;
    let (test, rest) = order.split_at(n_test.min(n));
    let (val, train) = rest.split_at(n_val.min(rest.len()));
    Ok(Split {
        train: train.to_vec(),
        val: val.to_vec(),
        test: test.to_vec(),
    })
}
