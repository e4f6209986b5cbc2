//! Seam-stitching attention kernel.
//!
//! Reference features are rolled along the width axis so that the panorama's
//! left/right boundary columns become contiguous, then each query token
//! attends to reference tokens inside a square window of radius `s`. The
//! window itself never wraps; the roll alone carries content across the seam.
//! A dense multi-head cross-attention over a bank of reference maps provides
//! the global branch of the block and doubles as the reference path that the
//! windowed kernel is validated against.

use rand::prelude::*;
use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tape, TensorError, TensorId};

/// Additive logit penalty for key tokens outside a query's window. Large
/// enough that `exp` underflows to exactly zero after max subtraction.
pub const MASK_PENALTY: f64 = -1e9;

#[derive(Debug, thiserror::Error)]
pub enum AttentionError {
    #[error("config: {0}")]
    Config(String),
    #[error("reference bank is empty")]
    EmptyBank,
    #[error("{op}: feature maps disagree: {left:?} vs {right:?}")]
    GridMismatch {
        op: &'static str,
        left: (usize, usize, usize),
        right: (usize, usize, usize),
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Hyperparameters of the attention stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PscConfig {
    /// Shift divisor: references roll right by `floor(W'/p)` columns.
    pub p: usize,
    /// Window radius in tokens.
    pub s: usize,
    pub heads: usize,
    pub channels: usize,
    pub num_blocks: usize,
    /// When set, the window's column distance wraps around the width seam in
    /// addition to the shift. Off by default; the shift alone is the
    /// seam-bridging mechanism.
    pub wrap_mask: bool,
}

impl Default for PscConfig {
    fn default() -> Self {
        PscConfig {
            p: 2,
            s: 7,
            heads: 8,
            channels: 32,
            num_blocks: 2,
            wrap_mask: false,
        }
    }
}

impl PscConfig {
    pub fn validate(&self) -> Result<(), AttentionError> {
        if self.p < 1 {
            return Err(AttentionError::Config("p must be >= 1".into()));
        }
        if self.heads == 0 || self.channels == 0 || self.num_blocks == 0 {
            return Err(AttentionError::Config(
                "heads, channels and num_blocks must be positive".into(),
            ));
        }
        if self.channels % self.heads != 0 {
            return Err(AttentionError::Config(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        Ok(())
    }

    /// Per-head projection dimension.
    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

/// A tape-resident token grid: `tokens` is `[h * w, c]`, flattened row-major
/// (y-major, then x).
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub tokens: TensorId,
}

impl FeatureMap {
    pub fn grid(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn token_count(&self) -> usize {
        self.height * self.width
    }
}

/// Columns rolled right by the stitching shift for width `w` and divisor `p`.
pub fn shift_amount(w: usize, p: usize) -> usize {
    (w / p) % w
}

/// Row permutation realizing a roll-right of the token grid by `delta`
/// columns: output token `(y, x)` takes input token `(y, (x - delta) mod w)`.
pub fn shift_permutation(h: usize, w: usize, delta: usize) -> Vec<usize> {
    let mut perm = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let src = (x + w - delta % w) % w;
            perm.push(y * w + src);
        }
    }
    perm
}

/// Moves the rightmost `floor(W'/p)` columns of the map to its left edge, so
/// the two sides of the panorama seam sit next to each other.
pub fn circular_shift_width<S: Scalar>(
    tape: &mut Tape<S>,
    feat: &FeatureMap,
    p: usize,
) -> Result<FeatureMap, AttentionError> {
    if p < 1 {
        return Err(AttentionError::Config("shift divisor p must be >= 1".into()));
    }
    let delta = shift_amount(feat.width, p);
    let perm = shift_permutation(feat.height, feat.width, delta);
    let tokens = tape.permute_rows(feat.tokens, perm)?;
    Ok(FeatureMap { tokens, ..*feat })
}

/// Boolean attention-permission matrix over row-major token indices: query
/// `(x, y)` may attend key `(i, j)` iff `(x-i)^2 <= s^2` and `(y-j)^2 <= s^2`
/// (column distance taken modulo the width when `wrap` is set).
#[derive(Clone, Debug)]
pub struct WindowMask {
    pub height: usize,
    pub width: usize,
    pub radius: usize,
    pub wrap: bool,
    allow: Vec<bool>,
}

impl WindowMask {
    pub fn build(height: usize, width: usize, radius: usize, wrap: bool) -> WindowMask {
        let hw = height * width;
        let mut allow = vec![false; hw * hw];
        let s2 = (radius * radius) as i64;
        for y in 0..height {
            for x in 0..width {
                let q = y * width + x;
                for j in 0..height {
                    for i in 0..width {
                        let dy = y as i64 - j as i64;
                        let mut dx = (x as i64 - i as i64).abs();
                        if wrap {
                            dx = dx.min(width as i64 - dx);
                        }
                        if dx * dx <= s2 && dy * dy <= s2 {
                            allow[q * hw + j * width + i] = true;
                        }
                    }
                }
            }
        }
        WindowMask { height, width, radius, wrap, allow }
    }

    pub fn token_count(&self) -> usize {
        self.height * self.width
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allow[query * self.token_count() + key]
    }

    /// Number of keys a query may attend.
    pub fn row_support(&self, query: usize) -> usize {
        let hw = self.token_count();
        self.allow[query * hw..(query + 1) * hw].iter().filter(|&&b| b).count()
    }

    pub fn is_symmetric(&self) -> bool {
        let hw = self.token_count();
        (0..hw).all(|a| (0..hw).all(|b| self.allows(a, b) == self.allows(b, a)))
    }

    /// Additive logit penalties: 0 where allowed, [`MASK_PENALTY`] elsewhere.
    pub fn penalties<S: Scalar>(&self) -> Vec<S> {
        self.allow
            .iter()
            .map(|&ok| if ok { S::zero() } else { S::from_f64(MASK_PENALTY) })
            .collect()
    }
}

/// The window of [`WindowMask`] described by its geometry instead of a dense
/// matrix, so sparse kernels can enumerate allowed keys without scanning.
#[derive(Clone, Copy, Debug)]
pub struct WindowGeometry {
    pub height: usize,
    pub width: usize,
    pub radius: usize,
    pub wrap: bool,
}

impl WindowGeometry {
    pub fn of(mask: &WindowMask) -> WindowGeometry {
        WindowGeometry {
            height: mask.height,
            width: mask.width,
            radius: mask.radius,
            wrap: mask.wrap,
        }
    }

    /// Visits the token index of every key the query at `(x, y)` may attend,
    /// each exactly once.
    pub fn for_each_key(&self, x: usize, y: usize, mut visit: impl FnMut(usize)) {
        let s = self.radius;
        let j_lo = y.saturating_sub(s);
        let j_hi = (y + s).min(self.height - 1);
        if !self.wrap || 2 * s + 1 >= self.width {
            let (i_lo, i_hi) = if self.wrap {
                (0, self.width - 1)
            } else {
                (x.saturating_sub(s), (x + s).min(self.width - 1))
            };
            for j in j_lo..=j_hi {
                for i in i_lo..=i_hi {
                    visit(j * self.width + i);
                }
            }
        } else {
            for j in j_lo..=j_hi {
                for di in 0..=2 * s {
                    let i = (x + self.width + di - s) % self.width;
                    visit(j * self.width + i);
                }
            }
        }
    }
}

/// Per-head projection weights. Every head owns `[channels, head_dim]`
/// matrices for Q, K and V; the `[channels, channels]` output projection is
/// shared.
#[derive(Clone, Debug)]
pub struct AttentionParams<S> {
    pub channels: usize,
    pub head_dim: usize,
    pub heads: Vec<AttentionHead<S>>,
    pub output: Vec<S>,
}

#[derive(Clone, Debug)]
pub struct AttentionHead<S> {
    pub wq: Vec<S>,
    pub wk: Vec<S>,
    pub wv: Vec<S>,
}

impl<S: Scalar> AttentionParams<S> {
    /// Seeded uniform init in `±1/sqrt(fan_in)`.
    pub fn init(channels: usize, heads: usize, rng: &mut impl Rng) -> AttentionParams<S> {
        let head_dim = channels / heads;
        let bound = 1.0 / (channels as f64).sqrt();
        let mut mat = |len: usize| -> Vec<S> {
            (0..len).map(|_| S::from_f64(rng.random_range(-bound..bound))).collect()
        };
        let heads = (0..heads)
            .map(|_| AttentionHead {
                wq: mat(channels * head_dim),
                wk: mat(channels * head_dim),
                wv: mat(channels * head_dim),
            })
            .collect();
        let output = mat(channels * channels);
        AttentionParams { channels, head_dim, heads, output }
    }

    pub fn cast<T: Scalar>(&self) -> AttentionParams<T> {
        let conv = |v: &[S]| v.iter().map(|&x| T::from_f64(x.to_f64())).collect();
        AttentionParams {
            channels: self.channels,
            head_dim: self.head_dim,
            heads: self
                .heads
                .iter()
                .map(|h| AttentionHead { wq: conv(&h.wq), wk: conv(&h.wk), wv: conv(&h.wv) })
                .collect(),
            output: conv(&self.output),
        }
    }
}

/// Tape handles for one attention module's weights.
#[derive(Clone, Debug)]
pub struct AttentionIds {
    pub heads: Vec<HeadIds>,
    pub output: TensorId,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadIds {
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
}

pub fn bind_attention<S: Scalar>(
    tape: &mut Tape<S>,
    params: &AttentionParams<S>,
    trainable: bool,
) -> Result<AttentionIds, TensorError> {
    let c = params.channels;
    let d = params.head_dim;
    let mut heads = Vec::with_capacity(params.heads.len());
    for h in &params.heads {
        heads.push(HeadIds {
            wq: tape.leaf(h.wq.clone(), vec![c, d], trainable)?,
            wk: tape.leaf(h.wk.clone(), vec![c, d], trainable)?,
            wv: tape.leaf(h.wv.clone(), vec![c, d], trainable)?,
        });
    }
    let output = tape.leaf(params.output.clone(), vec![c, c], trainable)?;
    Ok(AttentionIds { heads, output })
}

/// Masked scaled-dot-product attention over projected tokens: logits are
/// `Q Kᵀ / sqrt(scale_dim)` with [`MASK_PENALTY`] added to disallowed pairs
/// before the row softmax. With an all-true mask this reduces to dense
/// attention.
pub fn psc_attention<S: Scalar>(
    tape: &mut Tape<S>,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    penalty: Option<TensorId>,
    scale_dim: usize,
) -> Result<TensorId, TensorError> {
    let logits = tape.matmul_nt(q, k)?;
    let inv_scale = S::from_f64(1.0 / (scale_dim as f64).sqrt());
    let scaled = tape.scale(logits, inv_scale)?;
    let masked = match penalty {
        Some(p) => tape.add(scaled, p)?,
        None => scaled,
    };
    let weights = tape.softmax_rows(masked)?;
    tape.matmul(weights, v)
}

/// Uploads a window mask's additive penalties onto the tape.
pub fn upload_penalty<S: Scalar>(
    tape: &mut Tape<S>,
    mask: &WindowMask,
) -> Result<TensorId, TensorError> {
    let hw = mask.token_count();
    tape.constant(mask.penalties(), vec![hw, hw])
}

fn multi_head<S: Scalar>(
    tape: &mut Tape<S>,
    params: &AttentionIds,
    query_tokens: TensorId,
    kv_tokens: TensorId,
    penalty: Option<TensorId>,
    head_dim: usize,
) -> Result<TensorId, TensorError> {
    let mut head_outputs = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let q = tape.matmul(query_tokens, head.wq)?;
        let k = tape.matmul(kv_tokens, head.wk)?;
        let v = tape.matmul(kv_tokens, head.wv)?;
        head_outputs.push(psc_attention(tape, q, k, v, penalty, head_dim)?);
    }
    let concat = tape.concat_cols(&head_outputs)?;
    tape.matmul(concat, params.output)
}

/// Multi-head PSC attention: the reference map is rolled right by
/// `floor(W'/p)` columns, then each head projects the unshifted query and the
/// shifted reference and attends inside the window.
pub fn multi_head_psc<S: Scalar>(
    tape: &mut Tape<S>,
    params: &AttentionIds,
    query_feat: &FeatureMap,
    ref_feat: &FeatureMap,
    mask: &WindowMask,
    cfg: &PscConfig,
) -> Result<FeatureMap, AttentionError> {
    if query_feat.grid() != ref_feat.grid() {
        return Err(AttentionError::GridMismatch {
            op: "multi_head_psc",
            left: query_feat.grid(),
            right: ref_feat.grid(),
        });
    }
    let shifted = circular_shift_width(tape, ref_feat, cfg.p)?;
    let penalty = upload_penalty(tape, mask)?;
    let tokens = multi_head(
        tape,
        params,
        query_feat.tokens,
        shifted.tokens,
        Some(penalty),
        cfg.head_dim(),
    )?;
    Ok(FeatureMap { tokens, ..*query_feat })
}

/// Dense multi-head cross-attention: keys and values are the concatenation of
/// every reference map's tokens, with no shift and no window.
pub fn dense_cross_attention<S: Scalar>(
    tape: &mut Tape<S>,
    params: &AttentionIds,
    query_feat: &FeatureMap,
    ref_bank: &[FeatureMap],
    head_dim: usize,
) -> Result<FeatureMap, AttentionError> {
    if ref_bank.is_empty() {
        return Err(AttentionError::EmptyBank);
    }
    for r in ref_bank {
        if r.channels != query_feat.channels {
            return Err(AttentionError::GridMismatch {
                op: "dense_cross_attention",
                left: query_feat.grid(),
                right: r.grid(),
            });
        }
    }
    let kv = if ref_bank.len() == 1 {
        ref_bank[0].tokens
    } else {
        let parts: Vec<TensorId> = ref_bank.iter().map(|r| r.tokens).collect();
        tape.concat_rows(&parts)?
    };
    let tokens = multi_head(tape, params, query_feat.tokens, kv, None, head_dim)?;
    Ok(FeatureMap { tokens, ..*query_feat })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feature_from(tape: &mut Tape<f64>, h: usize, w: usize, c: usize, data: Vec<f64>) -> FeatureMap {
        let tokens = tape.constant(data, vec![h * w, c]).unwrap();
        FeatureMap { height: h, width: w, channels: c, tokens }
    }

    #[test]
    fn shift_rolls_right_by_w_over_p() {
        let mut tape = Tape::<f64>::new();
        // One row, W'=8, C=1, values 0..8.
        let feat = feature_from(&mut tape, 1, 8, 1, (0..8).map(f64::from).collect());
        let shifted = circular_shift_width(&mut tape, &feat, 4).unwrap();
        assert_eq!(tape.data(shifted.tokens), &[6.0, 7.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn shift_with_p_one_is_identity() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..12).map(f64::from).collect();
        let feat = feature_from(&mut tape, 2, 6, 1, data.clone());
        let shifted = circular_shift_width(&mut tape, &feat, 1).unwrap();
        assert_eq!(tape.data(shifted.tokens), &data[..]);
    }

    #[test]
    fn two_half_shifts_are_identity() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..16).map(f64::from).collect();
        let feat = feature_from(&mut tape, 2, 8, 1, data.clone());
        let once = circular_shift_width(&mut tape, &feat, 2).unwrap();
        let twice = circular_shift_width(&mut tape, &once, 2).unwrap();
        assert_eq!(tape.data(twice.tokens), &data[..]);
    }

    #[test]
    fn shift_rejects_zero_divisor() {
        let mut tape = Tape::<f64>::new();
        let feat = feature_from(&mut tape, 1, 4, 1, vec![0.0; 4]);
        assert!(matches!(
            circular_shift_width(&mut tape, &feat, 0),
            Err(AttentionError::Config(_))
        ));
    }

    #[test]
    fn corner_window_on_3x3_grid() {
        let mask = WindowMask::build(3, 3, 1, false);
        // Query (x=0, y=0) allows exactly (0,0), (1,0), (0,1), (1,1).
        let allowed: Vec<usize> = (0..9).filter(|&k| mask.allows(0, k)).collect();
        assert_eq!(allowed, vec![0, 1, 3, 4]);
        assert_eq!(mask.row_support(0), 4);
    }

    #[test]
    fn oversized_radius_gives_all_true_mask() {
        let mask = WindowMask::build(3, 4, 3, false);
        for q in 0..12 {
            assert_eq!(mask.row_support(q), 12);
        }
    }

    #[test]
    fn zero_radius_gives_identity_mask() {
        let mask = WindowMask::build(3, 3, 0, false);
        for q in 0..9 {
            for k in 0..9 {
                assert_eq!(mask.allows(q, k), q == k);
            }
        }
    }

    #[test]
    fn mask_is_symmetric_and_support_bounded() {
        for wrap in [false, true] {
            for s in 0..4 {
                let mask = WindowMask::build(4, 5, s, wrap);
                assert!(mask.is_symmetric());
                let cap = (2 * s + 1) * (2 * s + 1);
                for q in 0..mask.token_count() {
                    let support = mask.row_support(q);
                    assert!(support >= 1 && support <= cap);
                }
            }
        }
    }

    #[test]
    fn geometry_enumerates_exactly_the_mask() {
        for wrap in [false, true] {
            for (h, w) in [(1, 1), (2, 5), (4, 4), (3, 7)] {
                for s in 0..4 {
                    let mask = WindowMask::build(h, w, s, wrap);
                    let geom = WindowGeometry::of(&mask);
                    for y in 0..h {
                        for x in 0..w {
                            let q = y * w + x;
                            let mut seen = vec![false; h * w];
                            geom.for_each_key(x, y, |k| {
                                assert!(!seen[k], "key {k} visited twice");
                                seen[k] = true;
                            });
                            for k in 0..h * w {
                                assert_eq!(
                                    seen[k],
                                    mask.allows(q, k),
                                    "grid {h}x{w} s={s} wrap={wrap} q={q} k={k}"
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn uniform_query_averages_values() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(vec![0.0; 2 * 3], vec![2, 3]).unwrap();
        let k = tape.constant(vec![0.5, 1.0, -1.0, 0.25, 2.0, 0.0], vec![2, 3]).unwrap();
        let v = tape.constant(vec![2.0, 4.0, 6.0, 8.0, 10.0, 12.0], vec![2, 3]).unwrap();
        let out = psc_attention(&mut tape, q, k, v, None, 3).unwrap();
        for row in 0..2 {
            let got = &tape.data(out)[row * 3..(row + 1) * 3];
            assert!((got[0] - 5.0).abs() < 1e-12);
            assert!((got[1] - 7.0).abs() < 1e-12);
            assert!((got[2] - 9.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_evaluated_two_token_attention() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(vec![1.0, 0.0, 0.0, 0.0], vec![2, 2]).unwrap();
        let k = tape.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
        let v = tape.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
        let out = psc_attention(&mut tape, q, k, v, None, 2).unwrap();
        let row0 = &tape.data(out)[0..2];
        assert!((row0[0] - 0.6698).abs() < 1e-3);
        assert!((row0[1] - 0.3302).abs() < 1e-3);
    }

    #[test]
    fn identity_mask_returns_values_exactly() {
        let mut tape = Tape::<f64>::new();
        let mask = WindowMask::build(2, 2, 0, false);
        let penalty = upload_penalty(&mut tape, &mask).unwrap();
        let q = tape.constant(vec![0.3, -1.0, 0.5, 2.0, 1.1, 0.0, -0.4, 0.9], vec![4, 2]).unwrap();
        let k = tape.constant(vec![1.0, 0.2, -0.6, 0.8, 0.1, 0.4, 2.0, -1.3], vec![4, 2]).unwrap();
        let v_data = vec![5.0, 1.0, -2.0, 3.5, 0.25, -4.0, 7.0, 2.0];
        let v = tape.constant(v_data.clone(), vec![4, 2]).unwrap();
        let out = psc_attention(&mut tape, q, k, v, Some(penalty), 2).unwrap();
        assert_eq!(tape.data(out), &v_data[..]);
    }

    #[test]
    fn single_reference_dense_cross_equals_all_true_psc_with_p1() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (h, w, c, heads) = (2, 4, 6, 2);
        let params = AttentionParams::<f64>::init(c, heads, &mut rng);
        let mut tape = Tape::<f64>::new();
        let ids = bind_attention(&mut tape, &params, false).unwrap();
        let qdata: Vec<f64> = (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rdata: Vec<f64> = (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let query = feature_from(&mut tape, h, w, c, qdata);
        let reference = feature_from(&mut tape, h, w, c, rdata);
        let cfg = PscConfig { p: 1, s: 0, heads, channels: c, num_blocks: 1, wrap_mask: false };
        let all_true = WindowMask::build(h, w, h.max(w), false);
        let psc = multi_head_psc(&mut tape, &ids, &query, &reference, &all_true, &cfg).unwrap();
        let dense = dense_cross_attention(&mut tape, &ids, &query, &[reference], cfg.head_dim())
            .unwrap();
        for (a, b) in tape.data(psc.tokens).iter().zip(tape.data(dense.tokens)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn dense_cross_rejects_empty_bank() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let params = AttentionParams::<f64>::init(4, 2, &mut rng);
        let mut tape = Tape::<f64>::new();
        let ids = bind_attention(&mut tape, &params, false).unwrap();
        let query = feature_from(&mut tape, 1, 2, 4, vec![0.0; 8]);
        assert!(matches!(
            dense_cross_attention(&mut tape, &ids, &query, &[], 2),
            Err(AttentionError::EmptyBank)
        ));
    }

    #[test]
    fn config_rejects_indivisible_channels() {
        let cfg = PscConfig { channels: 30, heads: 8, ..PscConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
