//! Feedforward networks: evaluation, random generation, JSON IO, and the
//! product-of-spectral-norms baseline.
//!
//! A network with `K` weight layers maps `x_1` through
//! `x_{k+1} = phi(W_k x_k + b_k)` for `k < K` and returns `W_K x_K + b_K`.

use std::fmt;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance of the Gaussian used for generated weights.
pub const RANDOM_WEIGHT_VARIANCE: f64 = 0.5;

/// Iteration cap for [`spectral_norm`].
pub const POWER_ITERATION_CAP: usize = 10_000;

/// Default relative tolerance used by [`naive_lip`].
pub const SPECTRAL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    Tanh,
    /// Abstract slope-bounded activation with no concrete formula.
    Sector,
}

impl ActivationKind {
    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Sector => "sector",
        }
    }
}

/// Activation together with its sector bounds `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Activation {
    pub kind: ActivationKind,
    pub lo: f64,
    pub hi: f64,
}

impl Activation {
    pub fn relu() -> Self {
        Self { kind: ActivationKind::Relu, lo: 0.0, hi: 1.0 }
    }

    pub fn tanh() -> Self {
        Self { kind: ActivationKind::Tanh, lo: 0.0, hi: 1.0 }
    }

    pub fn sector(lo: f64, hi: f64) -> Result<Self> {
        let a = Self { kind: ActivationKind::Sector, lo, hi };
        a.validate()?;
        Ok(a)
    }

    fn validate(&self) -> Result<()> {
        if !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::NonFinite { location: "activation sector bounds".into() });
        }
        if self.lo > self.hi {
            return Err(Error::InvalidNetwork(format!(
                "sector lower bound {} exceeds upper bound {}",
                self.lo, self.hi
            )));
        }
        if self.kind != ActivationKind::Sector && (self.lo, self.hi) != (0.0, 1.0) {
            return Err(Error::InvalidNetwork(format!(
                "{} activation has sector [0, 1], got [{}, {}]",
                self.kind.name(),
                self.lo,
                self.hi
            )));
        }
        Ok(())
    }

    pub fn apply(&self, x: f64) -> Result<f64> {
        match self.kind {
            ActivationKind::Relu => Ok(x.max(0.0)),
            ActivationKind::Tanh => Ok(x.tanh()),
            ActivationKind::Sector => Err(Error::UnsupportedActivation("sector")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layer_sizes: Vec<usize>,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
    activation: Activation,
}

impl Network {
    /// Validates shapes and finiteness. `layer_sizes` is `[n_1, ..., n_K, m]`.
    pub fn new(
        layer_sizes: Vec<usize>,
        weights: Vec<DMatrix<f64>>,
        biases: Vec<DVector<f64>>,
        activation: Activation,
    ) -> Result<Self> {
        if layer_sizes.len() < 3 {
            return Err(Error::InvalidNetwork(format!(
                "need at least two weight layers, got layer_sizes of length {}",
                layer_sizes.len()
            )));
        }
        if let Some(pos) = layer_sizes.iter().position(|&n| n == 0) {
            return Err(Error::InvalidNetwork(format!("layer size {} is zero", pos + 1)));
        }
        let depth = layer_sizes.len() - 1;
        if weights.len() != depth {
            return Err(Error::InvalidNetwork(format!(
                "expected {depth} weight matrices, got {}",
                weights.len()
            )));
        }
        if biases.len() != depth {
            return Err(Error::InvalidNetwork(format!(
                "expected {depth} bias vectors, got {}",
                biases.len()
            )));
        }
        for (k, (w, b)) in weights.iter().zip(&biases).enumerate() {
            let (rows, cols) = (layer_sizes[k + 1], layer_sizes[k]);
            if w.nrows() != rows || w.ncols() != cols {
                return Err(Error::ShapeMismatch {
                    layer: k + 1,
                    detail: format!(
                        "weight is {}x{}, expected {rows}x{cols}",
                        w.nrows(),
                        w.ncols()
                    ),
                });
            }
            if b.len() != rows {
                return Err(Error::ShapeMismatch {
                    layer: k + 1,
                    detail: format!("bias has length {}, expected {rows}", b.len()),
                });
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { location: format!("weight of layer {}", k + 1) });
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { location: format!("bias of layer {}", k + 1) });
            }
        }
        activation.validate()?;
        Ok(Self { layer_sizes, weights, biases, activation })
    }

    /// Network with zero biases.
    pub fn without_bias(
        layer_sizes: Vec<usize>,
        weights: Vec<DMatrix<f64>>,
        activation: Activation,
    ) -> Result<Self> {
        let biases = layer_sizes[1..].iter().map(|&n| DVector::zeros(n)).collect();
        Self::new(layer_sizes, weights, biases, activation)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[DVector<f64>] {
        &self.biases
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Number of weight layers `K`.
    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn has_zero_bias(&self) -> bool {
        self.biases.iter().all(|b| b.iter().all(|&v| v == 0.0))
    }

    pub fn with_biases(&self, biases: Vec<DVector<f64>>) -> Result<Self> {
        Self::new(self.layer_sizes.clone(), self.weights.clone(), biases, self.activation)
    }

    pub fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), got: x.len() });
        }
        if self.activation.kind == ActivationKind::Sector {
            return Err(Error::UnsupportedActivation("sector"));
        }
        let last = self.depth() - 1;
        let mut h = x.clone();
        for (w, b) in self.weights[..last].iter().zip(&self.biases) {
            h = w * h + b;
            for v in h.iter_mut() {
                *v = self.activation.apply(*v)?;
            }
        }
        Ok(&self.weights[last] * h + &self.biases[last])
    }

    /// Copy with `W_k` replaced by `factors[k] * W_k`; biases untouched.
    pub fn scale_weights(&self, factors: &[f64]) -> Result<Self> {
        if factors.len() != self.depth() {
            return Err(Error::DimensionMismatch { expected: self.depth(), got: factors.len() });
        }
        if let Some((k, c)) = factors.iter().enumerate().find(|(_, c)| !(**c > 0.0 && c.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "scale factor for layer {} must be positive and finite, got {c}",
                k + 1
            )));
        }
        let weights = self.weights.iter().zip(factors).map(|(w, &c)| w * c).collect();
        Self::new(self.layer_sizes.clone(), weights, self.biases.clone(), self.activation)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: NetworkFile = serde_json::from_str(text)?;
        file.into_network()
    }

    pub fn to_json(&self) -> String {
        let file = NetworkFile::from(self);
        serde_json::to_string_pretty(&file).expect("network serialization is infallible")
    }
}

impl fmt::Display for Network {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sizes: Vec<String> = self.layer_sizes.iter().map(|n| n.to_string()).collect();
        write!(f, "network [{}] ({})", sizes.join(", "), self.activation.kind.name())
    }
}

/// `W{width}-D{depth}` naming used for generated networks.
pub fn random_network_name(width: usize, depth: usize) -> String {
    format!("W{width}-D{depth}")
}

/// Network with sizes `[2, width, ..., width, 2]`, `depth` weight layers,
/// i.i.d. `N(0, 1/2)` weights (variance 1/2), zero biases and relu.
pub fn random_network(width: usize, depth: usize, seed: u64) -> Result<Network> {
    if width < 1 || depth < 2 {
        return Err(Error::InvalidArgument(format!(
            "random network needs width >= 1 and depth >= 2, got width {width}, depth {depth}"
        )));
    }
    let mut sizes = vec![2];
    sizes.extend(std::iter::repeat_n(width, depth - 1));
    sizes.push(2);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, RANDOM_WEIGHT_VARIANCE.sqrt()).expect("valid normal");
    let weights = sizes
        .windows(2)
        .map(|w| {
            let (cols, rows) = (w[0], w[1]);
            // Row-major draw order so the stream matches the JSON layout.
            DMatrix::from_row_iterator(rows, cols, (0..rows * cols).map(|_| normal.sample(&mut rng)))
        })
        .collect();
    Network::without_bias(sizes, weights, Activation::relu())
}

/// Largest singular value by power iteration on `M^T M`.
///
/// Starts from the normalized all-ones vector and stops once the estimate
/// changes by at most `tol` relative. If that start happens to be orthogonal
/// to everything `M` sees, it restarts from the basis vector of the column
/// with largest norm.
pub fn spectral_norm(m: &DMatrix<f64>, tol: f64) -> Result<f64> {
    assert!(tol > 0.0, "tolerance must be positive");
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { location: "matrix passed to spectral_norm".into() });
    }
    if m.ncols() == 0 || m.nrows() == 0 || m.amax() == 0.0 {
        return Ok(0.0);
    }
    let ones = DVector::from_element(m.ncols(), 1.0 / (m.ncols() as f64).sqrt());
    match power_iterate(m, ones, tol)? {
        Some(s) => Ok(s),
        None => {
            let best_col = (0..m.ncols())
                .max_by(|&a, &b| m.column(a).norm().total_cmp(&m.column(b).norm()))
                .unwrap();
            let mut e = DVector::zeros(m.ncols());
            e[best_col] = 1.0;
            Ok(power_iterate(m, e, tol)?.unwrap_or(0.0))
        }
    }
}

fn power_iterate(m: &DMatrix<f64>, mut v: DVector<f64>, tol: f64) -> Result<Option<f64>> {
    let mt = m.transpose();
    let mut sigma = 0.0_f64;
    for _ in 0..POWER_ITERATION_CAP {
        let mv = m * &v;
        let next_sigma = mv.norm();
        let w = &mt * mv;
        let wn = w.norm();
        if wn == 0.0 {
            return Ok(None);
        }
        v = w / wn;
        if (next_sigma - sigma).abs() <= tol * next_sigma {
            return Ok(Some(next_sigma));
        }
        sigma = next_sigma;
    }
    Err(Error::PowerIteration { iters: POWER_ITERATION_CAP, estimate: sigma })
}

/// Product of the layer spectral norms.
pub fn naive_lip(net: &Network) -> Result<f64> {
    net.weights().iter().try_fold(1.0, |acc, w| Ok(acc * spectral_norm(w, SPECTRAL_TOL)?))
}

/// Per-layer spectral norms, in layer order.
pub fn layer_norms(net: &Network) -> Result<Vec<f64>> {
    net.weights().iter().map(|w| spectral_norm(w, SPECTRAL_TOL)).collect()
}

/// Largest spectral norm of the Jacobian `d x_k / d x_1`, over `probes`
/// standard Gaussian inputs, for each block `x_1, ..., x_K` and then for the
/// output. Relu and tanh use their derivative at the probe; the abstract
/// sector kind has no formula and uses the midpoint slope everywhere.
///
/// These are lower estimates of the true gains, good for scaling only.
pub fn probe_gains(net: &Network, probes: usize, seed: u64) -> Result<Vec<f64>> {
    let act = net.activation();
    let depth = net.depth();
    let mut best = vec![0.0_f64; depth + 1];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let rounds = if act.kind == ActivationKind::Sector { 1 } else { probes.max(1) };
    for _ in 0..rounds {
        let mut h = DVector::from_iterator(net.input_dim(), (0..net.input_dim()).map(|_| normal.sample(&mut rng)));
        let mut jac = DMatrix::<f64>::identity(net.input_dim(), net.input_dim());
        for k in 0..depth {
            best[k] = best[k].max(matrix_norm(&jac));
            let pre = &net.weights()[k] * &h + &net.biases()[k];
            jac = &net.weights()[k] * jac;
            if k + 1 == depth {
                break;
            }
            for (r, &p) in pre.iter().enumerate() {
                let slope = match act.kind {
                    ActivationKind::Relu => f64::from(u8::from(p > 0.0)),
                    ActivationKind::Tanh => 1.0 - p.tanh().powi(2),
                    ActivationKind::Sector => 0.5 * (act.lo + act.hi),
                };
                jac.row_mut(r).scale_mut(slope);
            }
            h = pre.map(|p| act.apply(p).unwrap_or(0.0));
        }
        best[depth] = best[depth].max(matrix_norm(&jac));
    }
    Ok(best)
}

fn matrix_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

// On-disk representation.

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkFile {
    layer_sizes: Vec<usize>,
    weights: Vec<Vec<Vec<Entry>>>,
    biases: Vec<Vec<Entry>>,
    activation: ActivationFile,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ActivationFile {
    kind: ActivationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hi: Option<f64>,
}

/// A number, or one of the strings `NaN`, `inf`, `-inf` (JSON has no
/// literal for these). Accepting them on read lets validation report a
/// non-finite entry instead of a generic parse failure.
#[derive(Clone, Copy)]
struct Entry(f64);

impl Serialize for Entry {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.0)
    }
}

impl<'de> Deserialize<'de> for Entry {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct EntryVisitor;
        impl Visitor<'_> for EntryVisitor {
            type Value = Entry;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a number")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Entry, E> {
                Ok(Entry(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Entry, E> {
                Ok(Entry(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Entry, E> {
                Ok(Entry(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Entry, E> {
                match v.to_ascii_lowercase().as_str() {
                    "nan" => Ok(Entry(f64::NAN)),
                    "inf" | "infinity" | "+inf" => Ok(Entry(f64::INFINITY)),
                    "-inf" | "-infinity" => Ok(Entry(f64::NEG_INFINITY)),
                    _ => Err(E::invalid_value(de::Unexpected::Str(v), &self)),
                }
            }
        }
        d.deserialize_any(EntryVisitor)
    }
}

impl NetworkFile {
    fn into_network(self) -> Result<Network> {
        let NetworkFile { layer_sizes, weights, biases, activation } = self;
        if layer_sizes.len() < 3 {
            return Err(Error::InvalidNetwork(format!(
                "need at least two weight layers, got layer_sizes of length {}",
                layer_sizes.len()
            )));
        }
        if weights.len() != layer_sizes.len() - 1 {
            return Err(Error::InvalidNetwork(format!(
                "expected {} weight matrices, got {}",
                layer_sizes.len() - 1,
                weights.len()
            )));
        }
        let mut mats = Vec::with_capacity(weights.len());
        for (k, rows) in weights.iter().enumerate() {
            let (want_rows, want_cols) = (layer_sizes[k + 1], layer_sizes[k]);
            if rows.len() != want_rows {
                return Err(Error::ShapeMismatch {
                    layer: k + 1,
                    detail: format!("weight has {} rows, expected {want_rows}", rows.len()),
                });
            }
            if let Some((r, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != want_cols) {
                return Err(Error::ShapeMismatch {
                    layer: k + 1,
                    detail: format!(
                        "weight row {} has {} columns, expected {want_cols}",
                        r + 1,
                        row.len()
                    ),
                });
            }
            mats.push(DMatrix::from_row_iterator(
                want_rows,
                want_cols,
                rows.iter().flatten().map(|e| e.0),
            ));
        }
        let vecs = biases
            .into_iter()
            .map(|b| DVector::from_iterator(b.len(), b.into_iter().map(|e| e.0)))
            .collect();
        let activation = match activation.kind {
            ActivationKind::Sector => {
                let (Some(lo), Some(hi)) = (activation.lo, activation.hi) else {
                    return Err(Error::InvalidNetwork(
                        "sector activation requires both `lo` and `hi`".into(),
                    ));
                };
                Activation { kind: ActivationKind::Sector, lo, hi }
            }
            kind => Activation {
                kind,
                lo: activation.lo.unwrap_or(0.0),
                hi: activation.hi.unwrap_or(1.0),
            },
        };
        Network::new(layer_sizes, mats, vecs, activation)
    }
}

impl From<&Network> for NetworkFile {
    fn from(net: &Network) -> Self {
        let weights = net
            .weights
            .iter()
            .map(|w| w.row_iter().map(|r| r.iter().map(|&v| Entry(v)).collect()).collect())
            .collect();
        let biases = net.biases.iter().map(|b| b.iter().map(|&v| Entry(v)).collect()).collect();
        let a = net.activation;
        let bounds = (a.kind == ActivationKind::Sector).then_some((a.lo, a.hi));
        NetworkFile {
            layer_sizes: net.layer_sizes.clone(),
            weights,
            biases,
            activation: ActivationFile {
                kind: a.kind,
                lo: bounds.map(|b| b.0),
                hi: bounds.map(|b| b.1),
            },
        }
    }
}
