//! Semantic alignment stream: prompt tokens, text and image encoders, the
//! contextual composition module (CCM) and the contrastive objective.

use thiserror::Error;

use crate::data::{Glyph, Placed, SceneSpec, Style, MAX_OBJECTS};
use crate::error::{Error, Result, TensorError};
use crate::nn::{normal, Linear, ParamStore};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// A parsed prompt is exactly a scene description.
pub type PromptSpec = SceneSpec;

pub const VOCAB_SIZE: usize = 30;
pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SCENE: usize = 3;
pub const PLAIN: usize = 4;
pub const INVERT: usize = 5;
pub const GLYPH: usize = 6;
pub const AT: usize = 7;
pub const SEMI: usize = 8;
pub const GLYPH_A: usize = 9;
pub const COORD_0: usize = 14;
pub const MAX_COORD: usize = 15;
/// Tokens per clause after padding.
pub const CLAUSE_LEN: usize = 5;

/// Surface form of every id, in id order.
pub fn vocab() -> [String; VOCAB_SIZE] {
    std::array::from_fn(|id| match id {
        PAD => "<pad>".to_string(),
        BOS => "<bos>".to_string(),
        EOS => "<eos>".to_string(),
        SCENE => "SCENE".to_string(),
        PLAIN => "plain".to_string(),
        INVERT => "invert".to_string(),
        GLYPH => "GLYPH".to_string(),
        AT => "AT".to_string(),
        SEMI => ";".to_string(),
        9..=13 => ((b'A' + (id - GLYPH_A) as u8) as char).to_string(),
        _ => (id - COORD_0).to_string(),
    })
}

fn token_id(word: &str) -> Option<usize> {
    Some(match word {
        "SCENE" => SCENE,
        "plain" => PLAIN,
        "invert" => INVERT,
        "GLYPH" => GLYPH,
        "AT" => AT,
        ";" => SEMI,
        "A" | "B" | "C" | "D" | "E" => GLYPH_A + (word.as_bytes()[0] - b'A') as usize,
        _ => return None,
    })
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("malformed prompt at token {position}: {detail}")]
    Malformed { position: usize, detail: String },
    #[error("unknown token {token:?} at position {position}")]
    UnknownToken { token: String, position: usize },
    #[error("coordinate {value} at position {position} outside 0..=15")]
    Coordinate { value: String, position: usize },
    #[error("prompt has no GLYPH clause")]
    NoGlyph,
    #[error("invalid token id {0}")]
    BadId(usize),
}

fn malformed(position: usize, detail: impl Into<String>) -> PromptError {
    PromptError::Malformed {
        position,
        detail: detail.into(),
    }
}

fn lex(word: &str, position: usize) -> std::result::Result<usize, PromptError> {
    if let Some(id) = token_id(word) {
        return Ok(id);
    }
    if !word.is_empty() && word.bytes().all(|b| b.is_ascii_digit()) {
        return match word.parse::<usize>() {
            Ok(v) if v <= MAX_COORD && (word == "0" || !word.starts_with('0')) => Ok(COORD_0 + v),
            _ => Err(PromptError::Coordinate {
                value: word.to_string(),
                position,
            }),
        };
    }
    Err(PromptError::UnknownToken {
        token: word.to_string(),
        position,
    })
}

/// Token ids of `text`, BOS-prefixed and EOS-suffixed. The grammar is checked.
pub fn tokenize_prompt(text: &str) -> std::result::Result<Vec<usize>, PromptError> {
    let words: Vec<&str> = text.split_ascii_whitespace().collect();
    if words.is_empty() {
        return Err(malformed(0, "empty prompt"));
    }
    let mut ids = vec![BOS];
    for (i, w) in words.iter().enumerate() {
        ids.push(lex(w, i)?);
    }
    ids.push(EOS);
    clauses(&ids)?;
    Ok(ids)
}

/// Inverse of [`tokenize_prompt`]; words joined by single spaces.
pub fn detokenize(ids: &[usize]) -> std::result::Result<String, PromptError> {
    let table = vocab();
    let mut words = Vec::new();
    for &id in ids {
        match id {
            BOS | EOS | PAD => {}
            id if id < VOCAB_SIZE => words.push(table[id].as_str()),
            id => return Err(PromptError::BadId(id)),
        }
    }
    Ok(words.join(" "))
}

fn is_glyph(id: usize) -> bool {
    (GLYPH_A..GLYPH_A + 5).contains(&id)
}

fn is_coord(id: usize) -> bool {
    (COORD_0..COORD_0 + MAX_COORD + 1).contains(&id)
}

/// Splits a token sequence into padded clauses: the SCENE clause first, then
/// one `GLYPH g AT r c` clause per object.
pub fn clauses(ids: &[usize]) -> std::result::Result<Vec<[usize; CLAUSE_LEN]>, PromptError> {
    if ids.first() != Some(&BOS) || ids.last() != Some(&EOS) || ids.len() < 2 {
        return Err(malformed(0, "missing BOS/EOS"));
    }
    let body = &ids[1..ids.len() - 1];
    if body.is_empty() {
        return Err(malformed(0, "empty prompt"));
    }
    let mut out = Vec::new();
    for (k, part) in body.split(|&t| t == SEMI).enumerate() {
        // Position of this clause's first word within the prompt.
        let pos = body.split(|&t| t == SEMI).take(k).map(|p| p.len() + 1).sum::<usize>();
        if k == 0 {
            match part {
                [SCENE, s] if *s == PLAIN || *s == INVERT => out.push([SCENE, *s, PAD, PAD, PAD]),
                _ => return Err(malformed(pos, "expected `SCENE plain|invert`")),
            }
        } else {
            match part {
                [GLYPH, g, AT, r, c] if is_glyph(*g) && is_coord(*r) && is_coord(*c) => out.push([GLYPH, *g, AT, *r, *c]),
                _ => return Err(malformed(pos, "expected `GLYPH <A-E> AT <row> <col>`")),
            }
        }
    }
    if out.len() < 2 {
        return Err(PromptError::NoGlyph);
    }
    Ok(out)
}

/// Parses prompt text into a validated scene.
pub fn parse_prompt(text: &str) -> Result<PromptSpec> {
    let ids = tokenize_prompt(text)?;
    let cl = clauses(&ids)?;
    let style = if cl[0][1] == INVERT { Style::Invert } else { Style::Plain };
    let objects = cl[1..]
        .iter()
        .map(|c| {
            let glyph = Glyph::from_id(c[1] - GLYPH_A).expect("checked glyph token");
            Placed::new(glyph, (c[3] - COORD_0) as u8, (c[4] - COORD_0) as u8)
        })
        .collect();
    SceneSpec::new(style, objects)
}

/// Padded clauses of a scene, straight from its canonical prompt.
pub fn scene_clauses(spec: &SceneSpec) -> Vec<[usize; CLAUSE_LEN]> {
    let mut out = vec![[SCENE, if spec.style == Style::Invert { INVERT } else { PLAIN }, PAD, PAD, PAD]];
    for o in spec.canonical().objects {
        out.push([
            GLYPH,
            GLYPH_A + o.glyph.id(),
            AT,
            COORD_0 + o.row as usize,
            COORD_0 + o.col as usize,
        ]);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignConfig {
    pub tau: f64,
    pub batch_size: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig { tau: 0.07, batch_size: 32 }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(Error::Metric(format!("temperature must be positive, got {}", self.tau)));
        }
        if self.batch_size < 2 {
            return Err(Error::Metric(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        Ok(())
    }
}

/// Token table plus a two-layer perceptron over the concatenated clause tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextEncoder {
    pub emb: usize,
    pub l1: Linear,
    pub l2: Linear,
    pub d: usize,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut RngStream, d: usize, hidden: usize) -> Self {
        // Variance 1/√d.
        let emb = store.add("text.emb", normal(rng, &[VOCAB_SIZE, d], (d as f64).powf(-0.25)));
        let l1 = Linear::new(store, rng, "text.l1", CLAUSE_LEN * d, hidden);
        let l2 = Linear::new(store, rng, "text.l2", hidden, d);
        TextEncoder { emb, l1, l2, d }
    }

    /// Unit-norm embedding for every clause, one row each.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], clauses: &[[usize; CLAUSE_LEN]]) -> Result<Var, TensorError> {
        let ids: Vec<usize> = clauses.iter().flatten().copied().collect();
        let tok = tape.gather_rows(p[self.emb], &ids)?;
        let x = tape.reshape(tok, &[clauses.len(), CLAUSE_LEN * self.d])?;
        let h = self.l1.forward(tape, p, x)?;
        let h = tape.relu(h)?;
        let y = self.l2.forward(tape, p, h)?;
        tape.normalize_rows(y)
    }
}

/// Two-layer perceptron from 256 pixels to a unit vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageEncoder {
    pub l1: Linear,
    pub l2: Linear,
}

impl ImageEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut RngStream, d: usize, hidden: usize) -> Self {
        ImageEncoder {
            l1: Linear::new(store, rng, "image.l1", crate::data::PIXELS, hidden),
            l2: Linear::new(store, rng, "image.l2", hidden, d),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var, TensorError> {
        let h = self.l1.forward(tape, p, x)?;
        let h = tape.relu(h)?;
        let y = self.l2.forward(tape, p, h)?;
        tape.normalize_rows(y)
    }
}

/// Global-query attention over local clauses with a residual connection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ccm {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub d: usize,
}

/// Additive mask for attention slots that belong to another prompt.
const MASKED: f64 = -1e9;

impl Ccm {
    pub fn new(store: &mut ParamStore, rng: &mut RngStream, d: usize) -> Self {
        Ccm {
            q: Linear::projection(store, rng, "ccm.q", d, d, 0.02),
            k: Linear::projection(store, rng, "ccm.k", d, d, 0.02),
            v: Linear::projection(store, rng, "ccm.v", d, d, 0.02),
            out: Linear::projection(store, rng, "ccm.out", d, d, 0.02),
            d,
        }
    }

    /// Composes `t_g` (B×d) with local rows `t_l` (L×d); `owner[j]` is the
    /// prompt that local row `j` belongs to. Inputs are renormalised first.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], tg: Var, tl: Option<Var>, owner: &[usize]) -> Result<Var, TensorError> {
        let tg = tape.normalize_rows(tg)?;
        let Some(tl) = tl else {
            return Ok(tg);
        };
        let b = tape.shape(tg)[0];
        let l = tape.shape(tl)[0];
        if owner.len() != l || owner.iter().any(|&o| o >= b) {
            return Err(crate::error::mismatch("ccm", &[b, l], &[owner.len()]));
        }
        let tl = tape.normalize_rows(tl)?;
        let q = self.q.forward(tape, p, tg)?;
        let k = self.k.forward(tape, p, tl)?;
        let v = self.v.forward(tape, p, tl)?;
        let scores = tape.matmul_nt(q, k)?;
        let scores = tape.scale(scores, 1.0 / (self.d as f64).sqrt())?;

        let mut mask = vec![T::from_f64(MASKED); b * l];
        let mut has_local = vec![T::zero(); b];
        for (j, &o) in owner.iter().enumerate() {
            mask[o * l + j] = T::zero();
            has_local[o] = T::one();
        }
        let mask = tape.constant(Tensor::new(vec![b, l], mask)?);
        let scores = tape.add(scores, mask)?;
        let attn = tape.softmax_rows(scores)?;
        let attn = if has_local.iter().all(|&h| h == T::one()) {
            attn
        } else {
            let keep = tape.constant(Tensor::vector(has_local));
            tape.scale_rows(attn, keep)?
        };
        let ctx = tape.matmul(attn, v)?;
        let ctx = self.out.forward(tape, p, ctx)?;
        let t = tape.add(tg, ctx)?;
        tape.normalize_rows(t)
    }
}

/// The alignment stream's learnable parts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoders {
    pub text: TextEncoder,
    pub image: ImageEncoder,
    pub ccm: Ccm,
    pub d: usize,
}

/// Row indices into a clause batch built by [`Encoders::batch_clauses`].
#[derive(Clone, Debug, Default)]
pub struct ClauseBatch {
    pub clauses: Vec<[usize; CLAUSE_LEN]>,
    pub global_rows: Vec<usize>,
    pub local_rows: Vec<usize>,
    pub owner: Vec<usize>,
}

impl Encoders {
    pub fn new(store: &mut ParamStore, rng: &mut RngStream, d: usize, hidden: usize) -> Self {
        Encoders {
            text: TextEncoder::new(store, rng, d, hidden),
            image: ImageEncoder::new(store, rng, d, hidden),
            ccm: Ccm::new(store, rng, d),
            d,
        }
    }

    pub fn batch_clauses(prompts: &[Vec<[usize; CLAUSE_LEN]>]) -> ClauseBatch {
        let mut cb = ClauseBatch::default();
        for (i, cl) in prompts.iter().enumerate() {
            cb.global_rows.push(cb.clauses.len());
            cb.clauses.push(cl[0]);
            for c in &cl[1..] {
                cb.local_rows.push(cb.clauses.len());
                cb.owner.push(i);
                cb.clauses.push(*c);
            }
        }
        cb
    }

    /// Returns `(t_g, t)` for a batch of prompts. With `use_ccm` false the
    /// composed embedding is `t_g` alone.
    pub fn text_forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        prompts: &[Vec<[usize; CLAUSE_LEN]>],
        use_ccm: bool,
    ) -> Result<(Var, Var), TensorError> {
        let cb = Self::batch_clauses(prompts);
        let all = self.text.forward(tape, p, &cb.clauses)?;
        let tg = tape.gather_rows(all, &cb.global_rows)?;
        if !use_ccm || cb.local_rows.is_empty() {
            return Ok((tg, tg));
        }
        let tl = tape.gather_rows(all, &cb.local_rows)?;
        let t = self.ccm.forward(tape, p, tg, Some(tl), &cb.owner)?;
        Ok((tg, t))
    }

    /// `(t_g, t_locals)` for one tokenized prompt.
    pub fn encode_text(&self, store: &ParamStore, tokens: &[usize]) -> Result<(Vec<f32>, Vec<Vec<f32>>)> {
        let cl = clauses(tokens)?;
        let mut tape = Tape::<f32>::new();
        let p = store.bind(&mut tape);
        let all = self.text.forward(&mut tape, &p, &cl)?;
        let v = tape.value(all);
        Ok((v.row(0).to_vec(), (1..cl.len()).map(|i| v.row(i).to_vec()).collect()))
    }

    /// Composed embedding for one prompt from explicit `t_g` and locals.
    pub fn compose_ccm(&self, store: &ParamStore, tg: &[f32], locals: &[Vec<f32>]) -> Result<Vec<f32>> {
        let d = self.d;
        if tg.len() != d || locals.iter().any(|l| l.len() != d) {
            return Err(crate::error::mismatch("compose_ccm", &[d], &[tg.len()]).into());
        }
        let mut tape = Tape::<f32>::new();
        let p = store.bind(&mut tape);
        let g = tape.constant(Tensor::new(vec![1, d], tg.to_vec())?);
        let tl = if locals.is_empty() {
            None
        } else {
            Some(tape.constant(Tensor::new(vec![locals.len(), d], locals.concat())?))
        };
        let owner = vec![0; locals.len()];
        let t = self.ccm.forward(&mut tape, &p, g, tl, &owner)?;
        Ok(tape.value(t).data().to_vec())
    }

    /// Unit-norm visual embedding of one canvas.
    pub fn encode_image(&self, store: &ParamStore, canvas: &[f32]) -> Result<Vec<f32>> {
        if canvas.len() != crate::data::PIXELS {
            return Err(Error::Scene(format!("canvas needs 256 values, got {}", canvas.len())));
        }
        if let Some(bad) = canvas.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Scene(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(self.encode_images(store, &[canvas.to_vec()])?.row(0).to_vec())
    }

    /// Visual embeddings for rows of pixels (no range check).
    pub fn encode_images(&self, store: &ParamStore, canvases: &[Vec<f32>]) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::stack_rows(canvases)?);
        let v = self.image.forward(&mut tape, &p, x)?;
        Ok(tape.value(v).clone())
    }

    /// Composed embeddings for scenes, one row each.
    pub fn encode_scenes(&self, store: &ParamStore, scenes: &[SceneSpec], use_ccm: bool) -> Result<Tensor<f32>> {
        let prompts: Vec<_> = scenes.iter().map(scene_clauses).collect();
        let mut tape = Tape::<f32>::new();
        let p = store.bind(&mut tape);
        let (_, t) = self.text_forward(&mut tape, &p, &prompts, use_ccm)?;
        Ok(tape.value(t).clone())
    }
}

/// Checks that every row has unit norm within `1e-5`.
pub fn check_unit_rows<T: Scalar>(x: &Tensor<T>) -> Result<()> {
    for i in 0..x.rows() {
        let n = x.row(i).iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-5 {
            return Err(Error::NotUnitNorm(n));
        }
    }
    Ok(())
}

/// Recorded InfoNCE loss over matched rows `(i, i)`; also returns the per-row
/// `−log softmax` terms.
pub fn contrastive_terms<T: Scalar>(tape: &mut Tape<T>, t: Var, v: Var, cfg: &AlignConfig) -> Result<(Var, Var)> {
    if tape.shape(t) != tape.shape(v) || tape.shape(t).len() != 2 {
        return Err(crate::error::mismatch("contrastive_loss", tape.shape(t), tape.shape(v)).into());
    }
    let n = tape.shape(t)[0];
    if n < 2 {
        return Err(Error::Metric(format!("contrastive loss needs N >= 2, got {n}")));
    }
    if cfg.tau.is_nan() || cfg.tau <= 0.0 {
        return Err(Error::Metric(format!("temperature must be positive, got {}", cfg.tau)));
    }
    check_unit_rows(tape.value(t))?;
    check_unit_rows(tape.value(v))?;
    let sim = tape.matmul_nt(t, v)?;
    let logits = tape.scale(sim, 1.0 / cfg.tau)?;
    let logp = tape.log_softmax_rows(logits)?;
    let diag: Vec<usize> = (0..n).collect();
    let picked = tape.pick(logp, &diag)?;
    let terms = tape.scale(picked, -1.0)?;
    let loss = tape.mean(terms)?;
    Ok((loss, terms))
}

pub fn contrastive_loss<T: Scalar>(tape: &mut Tape<T>, t: Var, v: Var, cfg: &AlignConfig) -> Result<Var> {
    contrastive_terms(tape, t, v, cfg).map(|(loss, _)| loss)
}

/// Every embedding of one prompt/image pair.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub t_g: Vec<f32>,
    pub t_locals: Vec<Vec<f32>>,
    pub t: Vec<f32>,
    pub v: Vec<f32>,
}

impl EmbeddingSet {
    pub fn compute(enc: &Encoders, store: &ParamStore, spec: &SceneSpec, canvas: &[f32]) -> Result<Self> {
        let ids = tokenize_prompt(&crate::data::scene_to_prompt(spec))?;
        let (t_g, t_locals) = enc.encode_text(store, &ids)?;
        let t = enc.compose_ccm(store, &t_g, &t_locals)?;
        let v = enc.encode_image(store, canvas)?;
        let set = EmbeddingSet { t_g, t_locals, t, v };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let all = std::iter::once(&self.t_g).chain(&self.t_locals).chain([&self.t, &self.v]);
        for e in all {
            let n = e.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-5 {
                return Err(Error::NotUnitNorm(n));
            }
        }
        if self.t_locals.len() > MAX_OBJECTS {
            return Err(Error::Scene("too many local embeddings".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_example() {
        let ids = tokenize_prompt("SCENE plain ; GLYPH A AT 2 3").unwrap();
        assert_eq!(ids, vec![1, 3, 4, 8, 6, 9, 7, 16, 17, 2]);
        assert_eq!(detokenize(&ids).unwrap(), "SCENE plain ; GLYPH A AT 2 3");
    }

    #[test]
    fn tokenize_errors() {
        assert!(matches!(tokenize_prompt(""), Err(PromptError::Malformed { .. })));
        assert!(matches!(
            tokenize_prompt("SCENE plain ; GLYPH F AT 2 3"),
            Err(PromptError::UnknownToken { .. })
        ));
        assert!(matches!(
            tokenize_prompt("SCENE plain ; GLYPH A AT 16 3"),
            Err(PromptError::Coordinate { .. })
        ));
        assert!(matches!(tokenize_prompt("SCENE plain"), Err(PromptError::NoGlyph)));
        assert!(matches!(
            tokenize_prompt("SCENE plain ; GLYPH A 2 3"),
            Err(PromptError::Malformed { .. })
        ));
        // Coordinates 12..15 tokenize but are not valid placements.
        assert!(tokenize_prompt("SCENE plain ; GLYPH A AT 12 3").is_ok());
        assert!(parse_prompt("SCENE plain ; GLYPH A AT 12 3").is_err());
    }

    #[test]
    fn parse_matches_scene() {
        let spec = parse_prompt("SCENE invert ; GLYPH C AT 0 0 ; GLYPH E AT 7 9").unwrap();
        assert_eq!(spec.style, Style::Invert);
        assert_eq!(spec.objects, vec![Placed::new(Glyph::C, 0, 0), Placed::new(Glyph::E, 7, 9)]);
    }

    #[test]
    fn contrastive_closed_forms() {
        let cfg = AlignConfig { tau: 1.0, batch_size: 2 };
        let mut tape = Tape::<f64>::new();
        let e = tape.constant(Tensor::eye(2));
        let loss = contrastive_loss(&mut tape, e, e, &cfg).unwrap();
        let want = (1.0 + (-1f64).exp()).ln();
        assert!((tape.value(loss).item() - want).abs() < 1e-12);
    }
}
