//! Scoring network: fully connected layer, residual temporal convolution,
//! dropout and a linear output layer producing `C` action score columns and
//! one threshold column.
//!
//! ```text
//! h1  = relu(x W1 + b1)
//! h2  = relu(h1 + conv3(h1) + bc)     conv3 zero-pads both ends
//! h3  = dropout(h2)                   inverted scaling, training only
//! out = h3 W2 + b2                    out[:, ..C] = s, out[:, C] = b
//! ```

use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

/// Hidden width used by the reference architecture.
pub const DEFAULT_HIDDEN_DIM: usize = 2048;
pub const KERNEL_TAPS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    /// `D x H`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `3 x H x H`, indexed `[tap, input, output]`; tap 0 reads snippet `t - 1`.
    pub conv: Array3<f64>,
    pub conv_bias: Array1<f64>,
    /// `H x (C + 1)`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Gradients of a scalar loss with respect to every [`NetworkParams`] field.
pub type GradientBundle = NetworkParams;

pub const PARAM_NAMES: [&str; 6] = ["w1", "b1", "conv", "conv_bias", "w2", "b2"];

impl NetworkParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        NetworkParams {
            w1: Array2::zeros((input_dim, hidden_dim)),
            b1: Array1::zeros(hidden_dim),
            conv: Array3::zeros((KERNEL_TAPS, hidden_dim, hidden_dim)),
            conv_bias: Array1::zeros(hidden_dim),
            w2: Array2::zeros((hidden_dim, num_classes + 1)),
            b2: Array1::zeros(num_classes + 1),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        input_dim: usize,
        hidden_dim: usize,
        num_classes: usize,
    ) -> Self {
        let mut p = Self::zeros(input_dim, hidden_dim, num_classes);
        let mut fill = |values: &mut [f64], fan_in: usize, fan_out: usize| {
            let a = glorot_bound(fan_in, fan_out);
            let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
            for v in values {
                *v = dist.sample(rng);
            }
        };
        fill(p.w1.as_slice_mut().unwrap(), input_dim, hidden_dim);
        fill(
            p.conv.as_slice_mut().unwrap(),
            KERNEL_TAPS * hidden_dim,
            KERNEL_TAPS * hidden_dim,
        );
        fill(p.w2.as_slice_mut().unwrap(), hidden_dim, num_classes + 1);
        p
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.w2.ncols() - 1
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.hidden_dim(), self.num_classes())
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn tensors(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.conv.as_slice().unwrap(),
            self.conv_bias.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.conv.as_slice_mut().unwrap(),
            self.conv_bias.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`, used to accumulate per-video gradients.
    pub fn add_scaled(&mut self, other: &NetworkParams, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    fn check_shapes(&self) -> Result<()> {
        let (d, h, c1) = (self.input_dim(), self.hidden_dim(), self.w2.ncols());
        let ok = self.b1.len() == h
            && self.conv.dim() == (KERNEL_TAPS, h, h)
            && self.conv_bias.len() == h
            && self.w2.nrows() == h
            && self.b2.len() == c1
            && c1 >= 2
            && d >= 1
            && h >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("inconsistent network parameter shapes".into()))
        }
    }
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Network output for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    /// `T x C` action scores.
    pub s: Array2<f64>,
    /// Length-`T` predicted thresholds.
    pub b: Array1<f64>,
}

impl ScoreMap {
    pub fn new(s: Array2<f64>, b: Array1<f64>) -> Self {
        assert_eq!(
            s.nrows(),
            b.len(),
            "score map rows must match threshold length"
        );
        ScoreMap { s, b }
    }

    fn from_output(out: &Array2<f64>) -> Self {
        let c = out.ncols() - 1;
        ScoreMap {
            s: out.slice(s![.., ..c]).to_owned(),
            b: out.column(c).to_owned(),
        }
    }

    pub fn num_snippets(&self) -> usize {
        self.s.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.s.ncols()
    }

    /// `s - b` broadcast over classes.
    pub fn offsets(&self) -> Array2<f64> {
        &self.s - &self.b.view().insert_axis(Axis(1))
    }

    /// Per-class midpoint of the score range within this video.
    pub fn manual_thresholds(&self) -> Array1<f64> {
        self.s.map_axis(Axis(0), |col| {
            let (lo, hi) = col
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                });
            (hi + lo) / 2.0
        })
    }

    /// `s - thr` with a constant per-class threshold.
    pub fn offsets_from(&self, thresholds: ArrayView1<f64>) -> Array2<f64> {
        &self.s - &thresholds.insert_axis(Axis(0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GatingKind {
    #[default]
    Sigmoid,
    /// `(x / (1 + |x|) + 1) / 2`
    Softsign,
    /// Unit step forward, identity (straight-through) backward.
    Binarize,
}

impl GatingKind {
    pub const ALL: [GatingKind; 3] = [
        GatingKind::Sigmoid,
        GatingKind::Softsign,
        GatingKind::Binarize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GatingKind::Sigmoid => "sigmoid",
            GatingKind::Softsign => "softsign",
            GatingKind::Binarize => "binarize",
        }
    }

    pub fn value(self, x: f64) -> f64 {
        match self {
            GatingKind::Sigmoid => sigmoid(x),
            GatingKind::Softsign => (x / (1.0 + x.abs()) + 1.0) / 2.0,
            GatingKind::Binarize => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Derivative used by the backward pass. For `Binarize` this is the
    /// straight-through surrogate, not the true derivative.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            GatingKind::Sigmoid => {
                let g = sigmoid(x);
                g * (1.0 - g)
            }
            GatingKind::Softsign => {
                let d = 1.0 + x.abs();
                0.5 / (d * d)
            }
            GatingKind::Binarize => 1.0,
        }
    }

    /// Whether [`derivative`](Self::derivative) is the exact derivative.
    pub fn is_exact(self) -> bool {
        !matches!(self, GatingKind::Binarize)
    }
}

impl std::fmt::Display for GatingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for GatingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GatingKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gating kind {s:?}")))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Soft localization matrix `g = phi(s - b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    pub g: Array2<f64>,
    pub kind: GatingKind,
}

impl Gate {
    pub fn from_offsets(offsets: &Array2<f64>, kind: GatingKind) -> Self {
        Gate {
            g: offsets.mapv(|x| kind.value(x)),
            kind,
        }
    }
}

pub fn apply_gate(score_map: &ScoreMap, kind: GatingKind) -> Gate {
    Gate::from_offsets(&score_map.offsets(), kind)
}

/// Inverted-dropout multiplier: `keep / (1 - rate)` per hidden unit and snippet.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub multiplier: Array2<f64>,
}

impl DropoutMask {
    pub fn sample<R: Rng + ?Sized>(
        rng: &mut R,
        num_snippets: usize,
        hidden_dim: usize,
        rate: f64,
    ) -> Self {
        assert!(
            (0.0..1.0).contains(&rate),
            "dropout rate must lie in [0, 1)"
        );
        let scale = 1.0 / (1.0 - rate);
        let multiplier = Array2::from_shape_simple_fn((num_snippets, hidden_dim), || {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                scale
            }
        });
        DropoutMask { multiplier }
    }
}

/// Intermediates kept by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    x: Array2<f64>,
    z1: Array2<f64>,
    h1: Array2<f64>,
    z2: Array2<f64>,
    h3: Array2<f64>,
    dropout: Option<Array2<f64>>,
}

pub fn forward(
    params: &NetworkParams,
    features: ArrayView2<f64>,
    dropout: Option<&DropoutMask>,
) -> Result<(ScoreMap, ForwardCache)> {
    params.check_shapes()?;
    let (t, d) = features.dim();
    let h = params.hidden_dim();
    if d != params.input_dim() || t == 0 {
        return Err(Error::Shape(format!(
            "features are {t} x {d}, network expects D = {}",
            params.input_dim()
        )));
    }
    if let Some(mask) = dropout {
        if mask.multiplier.dim() != (t, h) {
            return Err(Error::Shape(format!(
                "dropout mask is {:?}, expected ({t}, {h})",
                mask.multiplier.dim()
            )));
        }
    }

    let mut z1 = features.dot(&params.w1);
    z1 += &params.b1;
    let h1 = z1.mapv(relu);

    let mut z2 = &h1 + &params.conv_bias;
    add_temporal_conv(&mut z2, &h1, &params.conv);
    let h2 = z2.mapv(relu);

    let multiplier = dropout.map(|m| m.multiplier.clone());
    let h3 = match &multiplier {
        Some(m) => &h2 * m,
        None => h2,
    };

    let mut out = h3.dot(&params.w2);
    out += &params.b2;
    let cache = ForwardCache {
        x: features.to_owned(),
        z1,
        h1,
        z2,
        h3,
        dropout: multiplier,
    };
    Ok((ScoreMap::from_output(&out), cache))
}

/// `acc[t] += sum_k input[t + k - 1] K_k`, zero outside `[0, T)`.
fn add_temporal_conv(acc: &mut Array2<f64>, input: &Array2<f64>, kernel: &Array3<f64>) {
    let t = input.nrows();
    acc.scaled_add(1.0, &input.dot(&kernel.index_axis(Axis(0), 1)));
    if t > 1 {
        let prev = input
            .slice(s![..t - 1, ..])
            .dot(&kernel.index_axis(Axis(0), 0));
        acc.slice_mut(s![1.., ..]).scaled_add(1.0, &prev);
        let next = input.slice(s![1.., ..]).dot(&kernel.index_axis(Axis(0), 2));
        acc.slice_mut(s![..t - 1, ..]).scaled_add(1.0, &next);
    }
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Exact gradients given upstream `d_s` (`T x C`) and `d_b` (`T`).
/// `relu'(0)` is taken as 0.
pub fn backward(
    params: &NetworkParams,
    cache: &ForwardCache,
    d_s: ArrayView2<f64>,
    d_b: ArrayView1<f64>,
) -> Result<GradientBundle> {
    let t = cache.x.nrows();
    let c = params.num_classes();
    if d_s.dim() != (t, c) || d_b.len() != t {
        return Err(Error::Shape(format!(
            "upstream gradients {:?}/{} do not match ({t}, {c})",
            d_s.dim(),
            d_b.len()
        )));
    }
    let mut d_out = Array2::zeros((t, c + 1));
    d_out.slice_mut(s![.., ..c]).assign(&d_s);
    d_out.column_mut(c).assign(&d_b);

    let mut grads = params.zeros_like();
    grads.w2 = cache.h3.t().dot(&d_out);
    grads.b2 = d_out.sum_axis(Axis(0));

    let mut d_z2 = d_out.dot(&params.w2.t());
    if let Some(m) = &cache.dropout {
        d_z2 *= m;
    }
    Zip::from(&mut d_z2).and(&cache.z2).for_each(|d, &z| {
        if z <= 0.0 {
            *d = 0.0;
        }
    });
    grads.conv_bias = d_z2.sum_axis(Axis(0));

    let h1 = &cache.h1;
    grads
        .conv
        .index_axis_mut(Axis(0), 1)
        .assign(&h1.t().dot(&d_z2));
    let mut d_h1 = d_z2.clone();
    d_h1.scaled_add(1.0, &d_z2.dot(&params.conv.index_axis(Axis(0), 1).t()));
    if t > 1 {
        grads
            .conv
            .index_axis_mut(Axis(0), 0)
            .assign(&h1.slice(s![..t - 1, ..]).t().dot(&d_z2.slice(s![1.., ..])));
        grads
            .conv
            .index_axis_mut(Axis(0), 2)
            .assign(&h1.slice(s![1.., ..]).t().dot(&d_z2.slice(s![..t - 1, ..])));
        let from_next = d_z2
            .slice(s![1.., ..])
            .dot(&params.conv.index_axis(Axis(0), 0).t());
        d_h1.slice_mut(s![..t - 1, ..]).scaled_add(1.0, &from_next);
        let from_prev = d_z2
            .slice(s![..t - 1, ..])
            .dot(&params.conv.index_axis(Axis(0), 2).t());
        d_h1.slice_mut(s![1.., ..]).scaled_add(1.0, &from_prev);
    }

    let mut d_z1 = d_h1;
    Zip::from(&mut d_z1).and(&cache.z1).for_each(|d, &z| {
        if z <= 0.0 {
            *d = 0.0;
        }
    });
    grads.b1 = d_z1.sum_axis(Axis(0));
    grads.w1 = cache.x.t().dot(&d_z1);
    Ok(grads)
}

/// Pre-activations `(z1, z2)` of a cached forward pass, used to keep
/// finite-difference probes away from relu kinks.
pub fn cached_preactivations(cache: &ForwardCache) -> (&Array2<f64>, &Array2<f64>) {
    (&cache.z1, &cache.z2)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"TTCLOCNP";
const CHECKPOINT_VERSION: u32 = 1;

/// Checkpoint layout (all little-endian):
///
/// ```text
/// magic    8 bytes  "TTCLOCNP"
/// version  u32      1
/// D, H, C  u64 x 3
/// w1 (D*H), b1 (H), conv (3*H*H), conv_bias (H), w2 (H*(C+1)), b2 (C+1)   f64, row-major
/// ```
pub fn encode_checkpoint(params: &NetworkParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 + 24 + params.num_values() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for dim in [
        params.input_dim(),
        params.hidden_dim(),
        params.num_classes(),
    ] {
        out.extend_from_slice(&(dim as u64).to_le_bytes());
    }
    for tensor in params.tensors() {
        for v in tensor {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<NetworkParams> {
    let fail = |reason: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 36 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(fail("not a parameter checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let dim = |i: usize| u64::from_le_bytes(bytes[12 + 8 * i..20 + 8 * i].try_into().unwrap());
    let (d, h, c) = (dim(0), dim(1), dim(2));
    if d == 0 || h == 0 || c == 0 || d.max(h).max(c) > 1 << 20 {
        return Err(fail("implausible dimensions"));
    }
    let mut params = NetworkParams::zeros(d as usize, h as usize, c as usize);
    let body = &bytes[36..];
    if body.len() != params.num_values() * 8 {
        return Err(fail("payload length does not match dimensions"));
    }
    let mut values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for tensor in params.tensors_mut() {
        for v in tensor.iter_mut() {
            *v = values.next().unwrap();
        }
    }
    if !params.is_finite() {
        return Err(fail("non-finite parameter"));
    }
    Ok(params)
}

pub fn save_checkpoint(path: &Path, params: &NetworkParams) -> Result<()> {
    io::write_atomic(path, &encode_checkpoint(params))
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(seed: u64, d: usize, h: usize, c: usize) -> NetworkParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = NetworkParams::init(&mut rng, d, h, c);
        for t in p.tensors_mut() {
            for v in t.iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        p
    }

    fn random_features(seed: u64, t: usize, d: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((t, d), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_params_give_zero_scores() {
        let p = NetworkParams::zeros(3, 5, 2);
        let (sm, _) = forward(&p, random_features(1, 4, 3).view(), None).unwrap();
        assert!(sm.s.iter().all(|&v| v == 0.0));
        assert!(sm.b.iter().all(|&v| v == 0.0));
        assert_eq!(sm.s.dim(), (4, 2));
    }

    #[test]
    fn single_snippet_video() {
        let p = random_params(2, 3, 4, 2);
        let (sm, cache) = forward(&p, random_features(3, 1, 3).view(), None).unwrap();
        assert_eq!(sm.s.dim(), (1, 2));
        assert!(sm.s.iter().chain(sm.b.iter()).all(|v| v.is_finite()));
        let g = backward(
            &p,
            &cache,
            Array2::ones((1, 2)).view(),
            Array1::ones(1).view(),
        )
        .unwrap();
        assert!(g.is_finite());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let p = NetworkParams::zeros(3, 4, 2);
        assert!(matches!(
            forward(&p, random_features(1, 4, 2).view(), None),
            Err(Error::Shape(_))
        ));
        let (_, cache) = forward(&p, random_features(1, 4, 3).view(), None).unwrap();
        assert!(backward(
            &p,
            &cache,
            Array2::zeros((4, 3)).view(),
            Array1::zeros(4).view()
        )
        .is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = random_params(4, 3, 4, 2);
        let (_, cache) = forward(&p, random_features(5, 5, 3).view(), None).unwrap();
        let g = backward(
            &p,
            &cache,
            Array2::zeros((5, 2)).view(),
            Array1::zeros(5).view(),
        )
        .unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn identity_kernel_doubles_interior_and_counts_padding() {
        let h = 3;
        let mut kernel = Array3::zeros((3, h, h));
        for k in 0..3 {
            for i in 0..h {
                kernel[[k, i, i]] = 1.0;
            }
        }
        let input = Array2::from_elem((5, h), 2.0);
        let mut acc = input.clone();
        add_temporal_conv(&mut acc, &input, &kernel);
        // interior: h1 + 3 h1; boundary rows see one zero-padded neighbour.
        for t in 0..5 {
            let expect = if t == 0 || t == 4 {
                3.0 * 2.0
            } else {
                4.0 * 2.0
            };
            assert!(acc.row(t).iter().all(|&v| v == expect), "row {t}");
        }
        // With only the centre tap the residual block doubles a constant input.
        let mut centre = Array3::zeros((3, h, h));
        centre.index_axis_mut(Axis(0), 1).assign(&Array2::eye(h));
        let mut acc = input.clone();
        add_temporal_conv(&mut acc, &input, &centre);
        assert!(acc.iter().all(|&v| v == 4.0));
    }

    #[test]
    fn zeroed_kernel_reduces_to_fc_backward() {
        let mut p = random_params(6, 3, 4, 2);
        p.conv.fill(0.0);
        let x = random_features(7, 4, 3);
        let (_, cache) = forward(&p, x.view(), None).unwrap();
        let d_s = random_features(8, 4, 2);
        let d_b = Array1::from(vec![0.3, -0.2, 0.1, 0.5]);
        let g = backward(&p, &cache, d_s.view(), d_b.view()).unwrap();
        // Hand-rolled two-layer backward with the residual identity only.
        let mut d_out = Array2::zeros((4, 3));
        d_out.slice_mut(s![.., ..2]).assign(&d_s);
        d_out.column_mut(2).assign(&d_b);
        let mut d_h = d_out.dot(&p.w2.t());
        Zip::from(&mut d_h).and(&cache.z2).for_each(|d, &z| {
            if z <= 0.0 {
                *d = 0.0
            }
        });
        Zip::from(&mut d_h).and(&cache.z1).for_each(|d, &z| {
            if z <= 0.0 {
                *d = 0.0
            }
        });
        let w1 = x.t().dot(&d_h);
        for (a, b) in g.w1.iter().zip(w1.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn dropout_identity_without_mask_and_scaled_with() {
        let p = random_params(9, 2, 4, 2);
        let x = random_features(10, 3, 2);
        let (plain, _) = forward(&p, x.view(), None).unwrap();
        let ones = DropoutMask {
            multiplier: Array2::ones((3, 4)),
        };
        let (same, _) = forward(&p, x.view(), Some(&ones)).unwrap();
        assert_eq!(plain, same);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mask = DropoutMask::sample(&mut rng, 200, 50, 0.7);
        let kept = mask.multiplier.iter().filter(|&&v| v > 0.0).count() as f64 / 10_000.0;
        assert!((kept - 0.3).abs() < 0.02, "{kept}");
        assert!(mask
            .multiplier
            .iter()
            .all(|&v| v == 0.0 || (v - 1.0 / 0.3).abs() < 1e-12));
    }

    #[test]
    fn gate_values() {
        assert_eq!(GatingKind::Sigmoid.value(0.0), 0.5);
        assert_eq!(GatingKind::Softsign.value(0.0), 0.5);
        // 1 / (1 + e^-1) to 15 digits
        assert_relative_eq!(
            GatingKind::Sigmoid.value(1.0),
            0.731058578630005,
            epsilon = 1e-15
        );
        assert_eq!(GatingKind::Binarize.value(-0.3), 0.0);
        assert_eq!(GatingKind::Binarize.derivative(-0.3), 1.0);
        assert_eq!(GatingKind::Binarize.value(0.0), 0.0);
        assert_eq!(GatingKind::Binarize.value(1e-9), 1.0);
        let sm = ScoreMap::new(ndarray::array![[1.0, 2.0]], ndarray::array![1.0]);
        let g = apply_gate(&sm, GatingKind::Sigmoid);
        assert_eq!(g.g[[0, 0]], 0.5);
    }

    #[test]
    fn gate_derivatives_match_differences() {
        for kind in [GatingKind::Sigmoid, GatingKind::Softsign] {
            for &x in &[-3.0, -0.7, 0.4, 2.5] {
                let h = 1e-6;
                let fd = (kind.value(x + h) - kind.value(x - h)) / (2.0 * h);
                assert_relative_eq!(kind.derivative(x), fd, max_relative = 1e-7);
            }
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = NetworkParams::init(&mut ChaCha8Rng::seed_from_u64(11), 16, 32, 5);
        let b = NetworkParams::init(&mut ChaCha8Rng::seed_from_u64(11), 16, 32, 5);
        assert_eq!(a, b);
        assert!(a
            .b1
            .iter()
            .chain(a.conv_bias.iter())
            .chain(a.b2.iter())
            .all(|&v| v == 0.0));
        let bound = glorot_bound(32 * 3, 32 * 3);
        assert!(a.conv.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn init_w1_spread_matches_uniform_moment() {
        let (d, h) = (16, DEFAULT_HIDDEN_DIM);
        let p = NetworkParams::init(&mut ChaCha8Rng::seed_from_u64(12), d, h, 1);
        let n = p.w1.len() as f64;
        let mean = p.w1.sum() / n;
        let std = (p.w1.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let expect = glorot_bound(d, h) / 3f64.sqrt();
        assert!((std / expect - 1.0).abs() < 0.05, "{std} vs {expect}");
    }

    #[test]
    fn checkpoint_round_trip_and_rejection() {
        let p = random_params(13, 3, 4, 2);
        let bytes = encode_checkpoint(&p);
        assert_eq!(bytes.len(), 36 + p.num_values() * 8);
        let path = Path::new("mem");
        assert_eq!(decode_checkpoint(&bytes, path).unwrap(), p);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1], path).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad, path).is_err());
    }

    #[test]
    fn manual_thresholds_are_midpoints() {
        let sm = ScoreMap::new(
            ndarray::array![[1.0, 5.0], [3.0, 5.0], [-1.0, 5.0]],
            Array1::zeros(3),
        );
        assert_eq!(sm.manual_thresholds(), ndarray::array![1.0, 5.0]);
    }
}
