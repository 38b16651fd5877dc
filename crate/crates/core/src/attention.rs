//! Dual-stream person/garment attention, single head.
//!
//! Token matrices are `n x d` with one token per row. The person stream
//! attends over its own keys and the masked garment keys; the garment stream
//! normalizes jointly over both key sets but aggregates only its own values.
//! The DiT variant gives each stream a disjoint positional index range before
//! rotary embedding so tokens from different streams never share a position.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::ingest::MaskPlane;

pub const ROPE_BASE: f64 = 10000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamOrigin {
    Person,
    Garment,
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStream {
    pub q: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub origin: StreamOrigin,
}

impl AttentionStream {
    pub fn new(q: DMatrix<f64>, k: DMatrix<f64>, v: DMatrix<f64>, origin: StreamOrigin) -> Result<Self> {
        if q.shape() != k.shape() || q.shape() != v.shape() {
            return Err(Error::Dimension(format!(
                "Q {:?}, K {:?} and V {:?} must share a shape",
                q.shape(),
                k.shape(),
                v.shape()
            )));
        }
        if [&q, &k, &v].iter().any(|m| m.iter().any(|x| !x.is_finite())) {
            return Err(Error::InvalidArgument("attention stream has non-finite entries".into()));
        }
        Ok(Self { q, k, v, origin })
    }

    pub fn tokens(&self) -> usize {
        self.q.nrows()
    }

    pub fn dim(&self) -> usize {
        self.q.ncols()
    }
}

/// Aggregated features plus the row-stochastic (or, for the garment stream,
/// jointly normalized) weights that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub features: DMatrix<f64>,
    pub weights: DMatrix<f64>,
}

fn check_dim(a: &AttentionStream, b: &AttentionStream) -> Result<usize> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!(
            "feature dimension {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(a.dim())
}

/// Row-wise softmax of `q k^T / sqrt(d)` with max subtraction.
pub fn attention_weights(q: &DMatrix<f64>, k: &DMatrix<f64>) -> DMatrix<f64> {
    let d = q.ncols().max(1) as f64;
    let mut s = q * k.transpose() / d.sqrt();
    for mut row in s.row_iter_mut() {
        let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !top.is_finite() {
            continue;
        }
        row.apply(|x| *x = (*x - top).exp());
        let sum = row.sum();
        row /= sum;
    }
    s
}

fn vstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols().max(b.ncols()));
    out.rows_mut(0, a.nrows()).copy_from(a);
    out.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    out
}

/// Pools a cloth mask onto a `cols x rows` token grid (row-major), returning
/// 0/1 weights.
pub fn downsample_mask(mask: &MaskPlane, cols: usize, rows: usize) -> Vec<f64> {
    crate::resample::downsample_mask(mask, cols, rows)
        .data()
        .iter()
        .map(|&b| f64::from(b))
        .collect()
}

/// Person-stream output: attends over `[K_p ; K_c]` and aggregates
/// `[V_p ; mask * V_c]`.
pub fn cbs_person_attention(p: &AttentionStream, g: &AttentionStream, mask_tokens: &[f64]) -> Result<AttentionOutput> {
    check_dim(p, g)?;
    if mask_tokens.len() != g.tokens() {
        return Err(Error::Dimension(format!(
            "{} mask weights for {} garment tokens",
            mask_tokens.len(),
            g.tokens()
        )));
    }
    let keys = vstack(&p.k, &g.k);
    let mut masked = g.v.clone();
    for (mut row, &w) in masked.row_iter_mut().zip(mask_tokens) {
        row *= w;
    }
    let values = vstack(&p.v, &masked);
    let weights = attention_weights(&p.q, &keys);
    Ok(AttentionOutput {
        features: &weights * values,
        weights,
    })
}

/// Garment-stream output: weights are normalized over `[K_c ; K_p]` but only
/// the garment block aggregates `V_c`, so the rows of the used block sum to
/// less than one.
pub fn cbs_garment_attention(g: &AttentionStream, p: &AttentionStream) -> Result<AttentionOutput> {
    check_dim(g, p)?;
    let keys = vstack(&g.k, &p.k);
    let weights = attention_weights(&g.q, &keys);
    let features = weights.columns(0, g.tokens()) * &g.v;
    Ok(AttentionOutput { features, weights })
}

/// Positional index of every token in the three segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexLayout {
    pub text: Vec<usize>,
    pub person: Vec<usize>,
    pub garment: Vec<usize>,
}

impl IndexLayout {
    /// One past the largest assigned index.
    pub fn span(&self) -> usize {
        self.text
            .iter()
            .chain(&self.person)
            .chain(&self.garment)
            .map(|&i| i + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn total_tokens(&self) -> usize {
        self.text.len() + self.person.len() + self.garment.len()
    }

    /// Indices of the person stream's rows: text prefix then image tokens.
    pub fn person_stream(&self) -> Vec<usize> {
        self.text.iter().chain(&self.person).copied().collect()
    }

    pub fn garment_stream(&self) -> Vec<usize> {
        self.text.iter().chain(&self.garment).copied().collect()
    }

    /// Pairs of tokens from different segments that share an index.
    pub fn collisions(&self) -> usize {
        let segs = [&self.text, &self.person, &self.garment];
        let mut count = 0;
        for a in 0..3 {
            for b in a + 1..3 {
                for i in segs[a] {
                    count += segs[b].iter().filter(|&j| j == i).count();
                }
            }
        }
        count
    }
}

/// Contiguous disjoint ranges: text `[0, l_txt)`, person next, garment last.
pub fn pir_assign(l_txt: usize, l_person: usize, l_garment: usize) -> IndexLayout {
    let person_start = l_txt;
    let garment_start = l_txt + l_person;
    IndexLayout {
        text: (0..l_txt).collect(),
        person: (person_start..garment_start).collect(),
        garment: (garment_start..garment_start + l_garment).collect(),
    }
}

/// Baseline where both image streams restart at `l_txt`.
pub fn shared_index_assign(l_txt: usize, l_person: usize, l_garment: usize) -> IndexLayout {
    IndexLayout {
        text: (0..l_txt).collect(),
        person: (l_txt..l_txt + l_person).collect(),
        garment: (l_txt..l_txt + l_garment).collect(),
    }
}

/// Rotary angles for positions `0..len`; columns `2j` and `2j + 1` both hold
/// angle `p * base^(-2j/d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RotaryBasis {
    pub cos: DMatrix<f64>,
    pub sin: DMatrix<f64>,
}

impl RotaryBasis {
    pub fn new(len: usize, dim: usize) -> Result<Self> {
        if !dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "rotary dimension must be even, got {dim}"
            )));
        }
        let angle = |p: usize, c: usize| {
            let j = (c / 2) as f64;
            p as f64 * ROPE_BASE.powf(-2.0 * j / dim as f64)
        };
        Ok(Self {
            cos: DMatrix::from_fn(len, dim, |p, c| angle(p, c).cos()),
            sin: DMatrix::from_fn(len, dim, |p, c| angle(p, c).sin()),
        })
    }

    pub fn len(&self) -> usize {
        self.cos.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.cos.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.cos.ncols()
    }
}

/// Rotates each row's feature pairs by the angles of its assigned index.
pub fn rope_rotate(x: &DMatrix<f64>, indices: &[usize], basis: &RotaryBasis) -> Result<DMatrix<f64>> {
    let d = x.ncols();
    if !d.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "rotary dimension must be even, got {d}"
        )));
    }
    if d != basis.dim() {
        return Err(Error::Dimension(format!(
            "features {d} vs rotary basis {}",
            basis.dim()
        )));
    }
    if indices.len() != x.nrows() {
        return Err(Error::Dimension(format!(
            "{} indices for {} tokens",
            indices.len(),
            x.nrows()
        )));
    }
    if let Some(&bad) = indices.iter().find(|&&p| p >= basis.len()) {
        return Err(Error::Dimension(format!(
            "index {bad} beyond rotary basis length {}",
            basis.len()
        )));
    }
    let mut out = x.clone();
    for (r, &p) in indices.iter().enumerate() {
        for j in (0..d).step_by(2) {
            let (a, b) = (x[(r, j)], x[(r, j + 1)]);
            let (c, s) = (basis.cos[(p, j)], basis.sin[(p, j)]);
            out[(r, j)] = a * c - b * s;
            out[(r, j + 1)] = a * s + b * c;
        }
    }
    Ok(out)
}

/// DiT-style fusion. Each stream holds `l_txt` text tokens followed by its
/// image tokens; queries and keys are rotated at their layout indices, and
/// each stream additionally attends to the other's image block.
pub fn cbs_dit_attention(
    p: &AttentionStream,
    g: &AttentionStream,
    layout: &IndexLayout,
    basis: &RotaryBasis,
) -> Result<(AttentionOutput, AttentionOutput)> {
    check_dim(p, g)?;
    let l_txt = layout.text.len();
    let (l_p, l_c) = (layout.person.len(), layout.garment.len());
    if p.tokens() != l_txt + l_p || g.tokens() != l_txt + l_c {
        return Err(Error::Dimension(format!(
            "streams have {} and {} tokens, layout expects {} and {}",
            p.tokens(),
            g.tokens(),
            l_txt + l_p,
            l_txt + l_c
        )));
    }
    let (pi, gi) = (layout.person_stream(), layout.garment_stream());
    let qp = rope_rotate(&p.q, &pi, basis)?;
    let kp = rope_rotate(&p.k, &pi, basis)?;
    let qg = rope_rotate(&g.q, &gi, basis)?;
    let kg = rope_rotate(&g.k, &gi, basis)?;

    let kg_img = kg.rows(l_txt, l_c).into_owned();
    let vg_img = g.v.rows(l_txt, l_c).into_owned();
    let kp_img = kp.rows(l_txt, l_p).into_owned();
    let vp_img = p.v.rows(l_txt, l_p).into_owned();

    let wp = attention_weights(&qp, &vstack(&kp, &kg_img));
    let fp = &wp * vstack(&p.v, &vg_img);
    let wg = attention_weights(&qg, &vstack(&kg, &kp_img));
    let fg = &wg * vstack(&g.v, &vp_img);
    Ok((
        AttentionOutput {
            features: fp,
            weights: wp,
        },
        AttentionOutput {
            features: fg,
            weights: wg,
        },
    ))
}
