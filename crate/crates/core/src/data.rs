//! Synthetic glyph scenes: alphabet, sampling, rendering, prompt emission,
//! the `VGLY` dataset file and PGM images.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const CANVAS: usize = 16;
pub const PIXELS: usize = CANVAS * CANVAS;
pub const GLYPH: usize = 5;
/// Largest valid row/column of a glyph's top-left corner.
pub const MAX_POS: u8 = (CANVAS - GLYPH) as u8;
pub const MAX_OBJECTS: usize = 3;

pub const MAGIC: &[u8; 4] = b"VGLY";
pub const VERSION: u32 = 1;

const BITMAPS: [[&str; 5]; 5] = [
    ["00100", "00100", "11111", "00100", "00100"],
    ["10001", "01010", "00100", "01010", "10001"],
    ["11111", "10001", "10001", "10001", "11111"],
    ["11111", "00000", "11111", "00000", "11111"],
    ["10000", "01000", "00100", "00010", "00001"],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Glyph {
    A,
    B,
    C,
    D,
    E,
}

impl Glyph {
    pub const ALL: [Glyph; 5] = [Glyph::A, Glyph::B, Glyph::C, Glyph::D, Glyph::E];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Glyph> {
        Self::ALL.get(id).copied()
    }

    pub fn letter(self) -> char {
        (b'A' + self as u8) as char
    }

    /// Descriptive name of the pattern.
    pub fn shape_name(self) -> &'static str {
        ["PLUS", "CROSS", "SQUARE", "BARS", "DIAG"][self.id()]
    }

    /// 5×5 bitmap, rows top to bottom.
    pub fn bitmap(self) -> [[bool; GLYPH]; GLYPH] {
        let mut out = [[false; GLYPH]; GLYPH];
        for (r, line) in BITMAPS[self.id()].iter().enumerate() {
            for (c, ch) in line.bytes().enumerate() {
                out[r][c] = ch == b'1';
            }
        }
        out
    }

    pub fn on_bits(self) -> usize {
        self.bitmap().iter().flatten().filter(|&&b| b).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Style {
    Plain,
    Invert,
}

impl Style {
    pub fn as_str(self) -> &'static str {
        match self {
            Style::Plain => "plain",
            Style::Invert => "invert",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Placed {
    pub glyph: Glyph,
    pub row: u8,
    pub col: u8,
}

impl Placed {
    pub fn new(glyph: Glyph, row: u8, col: u8) -> Self {
        Placed { glyph, row, col }
    }

    fn overlaps(&self, other: &Placed) -> bool {
        (self.row as i32 - other.row as i32).abs() < GLYPH as i32 && (self.col as i32 - other.col as i32).abs() < GLYPH as i32
    }
}

/// Ground truth for one scene: global style plus 1..=3 non-overlapping glyphs.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SceneSpec {
    pub style: Style,
    pub objects: Vec<Placed>,
}

impl SceneSpec {
    /// Builds a spec, checking every invariant.
    pub fn new(style: Style, objects: Vec<Placed>) -> Result<Self> {
        let s = SceneSpec { style, objects };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.objects.len();
        if n == 0 || n > MAX_OBJECTS {
            return Err(Error::Scene(format!("object count {n} outside 1..={MAX_OBJECTS}")));
        }
        for o in &self.objects {
            if o.row > MAX_POS || o.col > MAX_POS {
                return Err(Error::Scene(format!("position ({}, {}) outside 0..={MAX_POS}", o.row, o.col)));
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                if self.objects[i].overlaps(&self.objects[j]) {
                    return Err(Error::Scene(format!("objects {i} and {j} overlap")));
                }
            }
        }
        Ok(())
    }

    /// Same scene with objects in (row, col) order.
    pub fn canonical(&self) -> SceneSpec {
        let mut objects = self.objects.clone();
        objects.sort_by_key(|o| (o.row, o.col, o.glyph));
        SceneSpec {
            style: self.style,
            objects,
        }
    }
}

impl fmt::Display for SceneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&scene_to_prompt(self))
    }
}

/// Object-count distribution and style probability for [`sample_scene`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneConfig {
    pub count_probs: [f64; 3],
    pub invert_prob: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            count_probs: [1.0 / 3.0; 3],
            invert_prob: 0.5,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.count_probs.iter().sum();
        if self.count_probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Scene(format!("count distribution {:?} must sum to 1", self.count_probs)));
        }
        if !(0.0..=1.0).contains(&self.invert_prob) {
            return Err(Error::Scene(format!("invert probability {} outside [0, 1]", self.invert_prob)));
        }
        Ok(())
    }
}

const MAX_ATTEMPTS: usize = 1000;

/// Samples a scene: object count, then a jointly uniform placement by rejection.
pub fn sample_scene(rng: &mut RngStream, cfg: &SceneConfig) -> SceneSpec {
    loop {
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut n = MAX_OBJECTS;
        for (k, &p) in cfg.count_probs.iter().enumerate() {
            acc += p;
            if u < acc {
                n = k + 1;
                break;
            }
        }
        let style = if rng.bernoulli(cfg.invert_prob) {
            Style::Invert
        } else {
            Style::Plain
        };
        for _ in 0..MAX_ATTEMPTS {
            let objects: Vec<Placed> = (0..n)
                .map(|_| {
                    let g = Glyph::ALL[rng.below(5) as usize];
                    let r = rng.below(MAX_POS as u64 + 1) as u8;
                    let c = rng.below(MAX_POS as u64 + 1) as u8;
                    Placed::new(g, r, c)
                })
                .collect();
            let spec = SceneSpec { style, objects };
            if spec.validate().is_ok() {
                return spec.canonical();
            }
        }
    }
}

/// Scene `i` of a dataset drawn from `seed`; independent of every other index.
pub fn scene_at(seed: u64, index: usize, cfg: &SceneConfig) -> SceneSpec {
    let mut rng = RngStream::new(seed).split(index as u64);
    sample_scene(&mut rng, cfg)
}

pub fn generate_scenes(seed: u64, count: usize, cfg: &SceneConfig) -> Vec<SceneSpec> {
    crate::par::map_indexed(count, |i| scene_at(seed, i, cfg))
}

/// A 16×16 image with values in [0, 1], row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Canvas {
    pixels: Vec<f32>,
}

impl Canvas {
    pub fn new(pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != PIXELS {
            return Err(Error::Scene(format!("canvas needs {PIXELS} pixels, got {}", pixels.len())));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Scene(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Canvas { pixels })
    }

    pub fn blank() -> Self {
        Canvas { pixels: vec![0.0; PIXELS] }
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.pixels[r * CANVAS + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.pixels[r * CANVAS + c] = v.clamp(0.0, 1.0);
    }

    pub fn ones(&self) -> usize {
        self.pixels.iter().filter(|&&v| v == 1.0).count()
    }

    /// Quantised to 0..=255.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| (v * 255.0).round() as u8).collect()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Canvas::new(bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }
}

/// Stamps the glyphs of a valid spec, inverting for the `invert` style.
pub fn render_scene(spec: &SceneSpec) -> Result<Canvas> {
    spec.validate()?;
    let mut px = vec![0.0f32; PIXELS];
    for o in &spec.objects {
        for (r, line) in o.glyph.bitmap().iter().enumerate() {
            for (c, &on) in line.iter().enumerate() {
                if on {
                    px[(o.row as usize + r) * CANVAS + o.col as usize + c] = 1.0;
                }
            }
        }
    }
    if spec.style == Style::Invert {
        px.iter_mut().for_each(|v| *v = 1.0 - *v);
    }
    Ok(Canvas { pixels: px })
}

/// Canonical prompt text; clauses follow (row, col) order.
pub fn scene_to_prompt(spec: &SceneSpec) -> String {
    let mut s = format!("SCENE {}", spec.style.as_str());
    for o in spec.canonical().objects {
        s.push_str(&format!(" ; GLYPH {} AT {} {}", o.glyph.letter(), o.row, o.col));
    }
    s
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DatasetError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported dataset version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated dataset: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("record {index}: {detail}")]
    Invalid { index: usize, detail: String },
    #[error("{0} trailing bytes after the last record")]
    Trailing(usize),
}

/// A scene with its rendered canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub scene: SceneSpec,
    pub canvas: Canvas,
}

impl Record {
    pub fn from_scene(scene: SceneSpec) -> Result<Self> {
        let canvas = render_scene(&scene)?;
        Ok(Record { scene, canvas })
    }
}

pub fn encoded_len(records: &[Record]) -> usize {
    16 + records.iter().map(|r| 2 + 3 * r.scene.objects.len() + PIXELS).sum::<usize>()
}

pub fn encode_dataset(records: &[Record]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(encoded_len(records));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for (i, rec) in records.iter().enumerate() {
        rec.scene.validate()?;
        let bytes = rec.canvas.to_bytes();
        if bytes.iter().any(|&b| b != 0 && b != 255) {
            return Err(DatasetError::Invalid {
                index: i,
                detail: "canvas must be binary".into(),
            }
            .into());
        }
        out.push(match rec.scene.style {
            Style::Plain => 0,
            Style::Invert => 1,
        });
        out.push(rec.scene.objects.len() as u8);
        for o in &rec.scene.objects {
            out.extend_from_slice(&[o.glyph as u8, o.row, o.col]);
        }
        out.extend_from_slice(&bytes);
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        if self.buf.len() - self.pos < n {
            return Err(DatasetError::Truncated {
                offset: self.pos,
                needed: n,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Parses a whole file image. Nothing is returned unless every record is valid.
pub fn decode_dataset(buf: &[u8]) -> Result<Vec<Record>> {
    let mut cur = Cursor { buf, pos: 0 };
    let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(DatasetError::BadMagic(magic).into());
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(DatasetError::Version {
            found: version,
            expected: VERSION,
        }
        .into());
    }
    let count = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
    let mut records = Vec::with_capacity(count.min(1 << 20));
    for index in 0..count {
        let head = cur.take(2)?;
        let invalid = |detail: String| DatasetError::Invalid { index, detail };
        let style = match head[0] {
            0 => Style::Plain,
            1 => Style::Invert,
            s => return Err(invalid(format!("style byte {s}")).into()),
        };
        let n = head[1] as usize;
        let mut objects = Vec::with_capacity(n);
        for _ in 0..n {
            let t = cur.take(3)?;
            let glyph = Glyph::from_id(t[0] as usize).ok_or_else(|| invalid(format!("glyph byte {}", t[0])))?;
            objects.push(Placed::new(glyph, t[1], t[2]));
        }
        let scene = SceneSpec { style, objects };
        scene.validate().map_err(|e| invalid(e.to_string()))?;
        let bytes = cur.take(PIXELS)?;
        if bytes.iter().any(|&b| b != 0 && b != 255) {
            return Err(invalid("canvas byte other than 0 or 255".into()).into());
        }
        let canvas = Canvas::from_bytes(bytes)?;
        if canvas != render_scene(&scene)? {
            return Err(invalid("canvas does not match its scene".into()).into());
        }
        records.push(Record { scene, canvas });
    }
    if cur.pos != buf.len() {
        return Err(DatasetError::Trailing(buf.len() - cur.pos).into());
    }
    Ok(records)
}

pub fn write_dataset(path: impl AsRef<Path>, records: &[Record]) -> Result<()> {
    let bytes = encode_dataset(records)?;
    std::fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let mut buf = Vec::new();
    std::fs::File::open(path.as_ref())
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path.as_ref(), e))?;
    decode_dataset(&buf)
}

/// Binary PGM (P5, maxval 255).
pub fn encode_pgm(canvas: &Canvas) -> Vec<u8> {
    let mut out = format!("P5\n{CANVAS} {CANVAS}\n255\n").into_bytes();
    out.extend(canvas.to_bytes());
    out
}

pub fn write_pgm(path: impl AsRef<Path>, canvas: &Canvas) -> Result<()> {
    std::fs::File::create(path.as_ref())
        .and_then(|mut f| f.write_all(&encode_pgm(canvas)))
        .map_err(|e| Error::io(path, e))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Canvas> {
    let header = format!("P5\n{CANVAS} {CANVAS}\n255\n");
    if !bytes.starts_with(header.as_bytes()) || bytes.len() != header.len() + PIXELS {
        return Err(Error::Scene("not a 16x16 P5 image".into()));
    }
    Canvas::from_bytes(&bytes[header.len()..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alphabet_separation() {
        let mut min = usize::MAX;
        for a in Glyph::ALL {
            assert!(a.on_bits() >= 5);
            for b in Glyph::ALL {
                if a < b {
                    let d = a
                        .bitmap()
                        .iter()
                        .flatten()
                        .zip(b.bitmap().iter().flatten())
                        .filter(|(x, y)| x != y)
                        .count();
                    min = min.min(d);
                    if (a, b) == (Glyph::C, Glyph::D) {
                        assert_eq!(d, 7);
                    }
                    // DIAG is a subset of CROSS.
                    if (a, b) == (Glyph::B, Glyph::E) {
                        assert_eq!(d, 4);
                    }
                }
            }
        }
        assert_eq!(min, 4);
    }

    #[test]
    fn plus_at_origin() {
        let spec = SceneSpec::new(Style::Plain, vec![Placed::new(Glyph::A, 0, 0)]).unwrap();
        assert_eq!(render_scene(&spec).unwrap().ones(), 9);
        let inv = SceneSpec {
            style: Style::Invert,
            ..spec
        };
        assert_eq!(render_scene(&inv).unwrap().ones(), 247);
    }

    #[test]
    fn prompt_emission_is_canonical() {
        let spec = SceneSpec::new(Style::Plain, vec![Placed::new(Glyph::A, 2, 3)]).unwrap();
        assert_eq!(scene_to_prompt(&spec), "SCENE plain ; GLYPH A AT 2 3");
        let two = SceneSpec::new(Style::Invert, vec![Placed::new(Glyph::E, 9, 1), Placed::new(Glyph::B, 0, 7)]).unwrap();
        assert_eq!(scene_to_prompt(&two), "SCENE invert ; GLYPH B AT 0 7 ; GLYPH E AT 9 1");
    }

    #[test]
    fn overlapping_spec_is_rejected() {
        let objs = vec![Placed::new(Glyph::A, 0, 0), Placed::new(Glyph::B, 4, 4)];
        assert!(SceneSpec::new(Style::Plain, objs).is_err());
        let objs = vec![Placed::new(Glyph::A, 0, 0), Placed::new(Glyph::B, 5, 0)];
        assert!(SceneSpec::new(Style::Plain, objs).is_ok());
    }

    #[test]
    fn sampling_is_seeded() {
        let cfg = SceneConfig::default();
        assert_eq!(scene_at(5, 17, &cfg), scene_at(5, 17, &cfg));
        let mut rng = RngStream::new(9);
        for _ in 0..10_000 {
            sample_scene(&mut rng, &cfg).validate().unwrap();
        }
    }

    #[test]
    fn dataset_round_trip_and_corruption() {
        let recs: Vec<Record> = generate_scenes(1, 50, &SceneConfig::default())
            .into_iter()
            .map(|s| Record::from_scene(s).unwrap())
            .collect();
        let bytes = encode_dataset(&recs).unwrap();
        assert_eq!(bytes.len(), encoded_len(&recs));
        assert_eq!(decode_dataset(&bytes).unwrap(), recs);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(Error::Dataset(DatasetError::BadMagic(_)))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_dataset(&bad), Err(Error::Dataset(DatasetError::Version { .. }))));
        assert!(matches!(
            decode_dataset(&bytes[..bytes.len() - 1]),
            Err(Error::Dataset(DatasetError::Truncated { .. }))
        ));
    }

    #[test]
    fn pgm_round_trip() {
        let spec = scene_at(2, 0, &SceneConfig::default());
        let c = render_scene(&spec).unwrap();
        assert_eq!(decode_pgm(&encode_pgm(&c)).unwrap(), c);
    }
}
