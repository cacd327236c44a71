//! Per-box MLP, transformer encoder blocks, and the dot-product linking
//! score matrix.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{BottError, Result};
use crate::featurizer::{featurize, RawFeatureMatrix};
use crate::types::SlidingWindow;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_dim: usize,
    /// Output widths of the per-box MLP; the last one is the model width d.
    pub mlp_dims: Vec<usize>,
    pub n_enc: usize,
    pub n_heads: usize,
    /// Widths of the two feed-forward layers; the last must equal d.
    pub ffn_dims: Vec<usize>,
}

impl NetworkConfig {
    /// Full-size configuration: MLP (1024, 1024, 1024, 512), three encoder
    /// blocks, eight heads, feed-forward (1024, 512).
    pub fn full(input_dim: usize) -> Self {
        NetworkConfig {
            input_dim,
            mlp_dims: vec![1024, 1024, 1024, 512],
            n_enc: 3,
            n_heads: 8,
            ffn_dims: vec![1024, 512],
        }
    }

    /// Same topology at a width that trains in minutes on one CPU core.
    pub fn desk(input_dim: usize) -> Self {
        NetworkConfig {
            input_dim,
            mlp_dims: vec![64, 64, 64, 64],
            n_enc: 3,
            n_heads: 4,
            ffn_dims: vec![128, 64],
        }
    }

    pub fn d_model(&self) -> usize {
        *self.mlp_dims.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        let bad = |m: String| Err(BottError::Config(m));
        if self.input_dim == 0 || self.mlp_dims.is_empty() || self.mlp_dims.contains(&0) {
            return bad("network input and MLP widths must be positive".into());
        }
        if self.n_enc > 0 {
            if self.ffn_dims.len() != 2 || self.ffn_dims[0] == 0 || self.ffn_dims[1] != d {
                return bad(format!("ffn_dims must be [d_f, {d}], got {:?}", self.ffn_dims));
            }
            if self.n_heads == 0 || d % self.n_heads != 0 {
                return bad(format!("model width {d} not divisible by {} heads", self.n_heads));
            }
        }
        Ok(())
    }

    /// `(name, shape)` of every parameter in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let lin = |out: &mut Vec<(String, Vec<usize>)>, name: String, a: usize, b: usize| {
            out.push((format!("{name}.weight"), vec![a, b]));
            out.push((format!("{name}.bias"), vec![b]));
        };
        let mut prev = self.input_dim;
        for (i, w) in self.mlp_dims.iter().enumerate() {
            lin(&mut out, format!("mlp.{i}"), prev, *w);
            prev = *w;
        }
        let d = self.d_model();
        for b in 0..self.n_enc {
            for p in ["q", "k", "v", "o"] {
                lin(&mut out, format!("enc.{b}.attn.{p}"), d, d);
            }
            out.push((format!("enc.{b}.ln1.gain"), vec![d]));
            out.push((format!("enc.{b}.ln1.shift"), vec![d]));
            lin(&mut out, format!("enc.{b}.ffn.0"), d, self.ffn_dims[0]);
            lin(&mut out, format!("enc.{b}.ffn.1"), self.ffn_dims[0], self.ffn_dims[1]);
            out.push((format!("enc.{b}.ln2.gain"), vec![d]));
            out.push((format!("enc.{b}.ln2.shift"), vec![d]));
        }
        out
    }
}

/// Named parameter tensors in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Params<T> {
    pub fn new(names: Vec<String>, tensors: Vec<Tensor<T>>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(BottError::Checkpoint(format!("{} names for {} tensors", names.len(), tensors.len())));
        }
        let index: HashMap<String, usize> = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        if index.len() != names.len() {
            return Err(BottError::Checkpoint("duplicate parameter names".into()));
        }
        Ok(Params { names, tensors, index })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Checks names and shapes against a configuration.
    pub fn check(&self, cfg: &NetworkConfig) -> Result<()> {
        let want = cfg.param_shapes();
        if want.len() != self.len() {
            return Err(BottError::Checkpoint(format!(
                "expected {} tensors for this config, found {}",
                want.len(),
                self.len()
            )));
        }
        for ((name, shape), (have_name, t)) in want.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != have_name || *shape != t.shape {
                return Err(BottError::Checkpoint(format!(
                    "expected {name} {shape:?}, found {have_name} {:?}",
                    t.shape
                )));
            }
            if !t.all_finite() {
                return Err(BottError::Checkpoint(format!("{name} holds non-finite values")));
            }
        }
        Ok(())
    }
}

/// Xavier-uniform weights, zero biases, unit layer-norm gains.
pub fn init_params(cfg: &NetworkConfig, seed: u64) -> Result<Params<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape) in cfg.param_shapes() {
        let t = if name.ends_with(".weight") {
            let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
            let n = shape[0] * shape[1];
            Tensor::from_vec(&shape, (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect())?
        } else if name.ends_with(".gain") {
            Tensor::from_vec(&shape, vec![1.0; shape[0]])?
        } else {
            Tensor::zeros(&shape)
        };
        names.push(name);
        tensors.push(t);
    }
    Params::new(names, tensors)
}

/// Parameters recorded on a tape, addressable by name.
pub struct ParamVars<'a> {
    vars: Vec<Var>,
    params_index: &'a HashMap<String, usize>,
}

impl<'a> ParamVars<'a> {
    /// Wraps vars already on a tape, one per parameter in canonical order.
    pub fn from_vars<T: Real>(vars: Vec<Var>, params: &'a Params<T>) -> Result<Self> {
        if vars.len() != params.len() {
            return Err(BottError::domain(format!("{} vars for {} parameters", vars.len(), params.len())));
        }
        Ok(ParamVars {
            vars,
            params_index: &params.index,
        })
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.params_index
            .get(name)
            .map(|i| self.vars[*i])
            .ok_or_else(|| BottError::Checkpoint(format!("missing parameter {name}")))
    }

    /// Vars in canonical parameter order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Records parameters as differentiable leaves (`trainable`) or constants.
pub fn record_params<'a, T: Real>(tape: &mut Tape<T>, params: &'a Params<T>, trainable: bool) -> ParamVars<'a> {
    let vars = params
        .tensors
        .iter()
        .map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
        .collect();
    ParamVars {
        vars,
        params_index: &params.index,
    }
}

/// Tape handles produced by [`encode_boxes`].
pub struct Encoded {
    /// `N_pad x d` encoder output; rows past the real count are unspecified.
    pub embeddings: Var,
    /// One attention node per encoder block.
    pub attention: Vec<Var>,
}

/// Per-box MLP followed by the encoder blocks. `features` is
/// `pad_mask.len() x input_dim`; rows flagged in `pad_mask` are padding.
pub fn encode_boxes<T: Real>(
    tape: &mut Tape<T>,
    cfg: &NetworkConfig,
    p: &ParamVars,
    features: Tensor<T>,
    pad_mask: &[bool],
) -> Result<Encoded> {
    if pad_mask.is_empty() || pad_mask.iter().all(|m| *m) {
        return Err(BottError::domain("encode_boxes needs at least one real box"));
    }
    if features.rank() != 2 || features.rows() != pad_mask.len() || features.cols() != cfg.input_dim {
        return Err(BottError::Shape {
            op: "encode_boxes",
            detail: format!("features {:?} for {} rows of width {}", features.shape, pad_mask.len(), cfg.input_dim),
        });
    }
    let mut h = tape.constant(features);
    for i in 0..cfg.mlp_dims.len() {
        let y = tape.linear(h, p.var(&format!("mlp.{i}.weight"))?, p.var(&format!("mlp.{i}.bias"))?)?;
        h = tape.relu(y);
    }
    let mut attention = Vec::with_capacity(cfg.n_enc);
    for b in 0..cfg.n_enc {
        let proj = |tape: &mut Tape<T>, x: Var, name: &str| -> Result<Var> {
            tape.linear(x, p.var(&format!("{name}.weight"))?, p.var(&format!("{name}.bias"))?)
        };
        let q = proj(tape, h, &format!("enc.{b}.attn.q"))?;
        let k = proj(tape, h, &format!("enc.{b}.attn.k"))?;
        let v = proj(tape, h, &format!("enc.{b}.attn.v"))?;
        let a = tape.attention(q, k, v, cfg.n_heads, pad_mask)?;
        attention.push(a);
        let o = proj(tape, a, &format!("enc.{b}.attn.o"))?;
        let r = tape.add(h, o)?;
        let h1 = tape.layer_norm(
            r,
            p.var(&format!("enc.{b}.ln1.gain"))?,
            p.var(&format!("enc.{b}.ln1.shift"))?,
            LAYER_NORM_EPS,
        )?;
        let f0 = proj(tape, h1, &format!("enc.{b}.ffn.0"))?;
        let f0 = tape.relu(f0);
        let f1 = proj(tape, f0, &format!("enc.{b}.ffn.1"))?;
        let f1 = tape.relu(f1);
        let r2 = tape.add(h1, f1)?;
        h = tape.layer_norm(
            r2,
            p.var(&format!("enc.{b}.ln2.gain"))?,
            p.var(&format!("enc.{b}.ln2.shift"))?,
            LAYER_NORM_EPS,
        )?;
    }
    Ok(Encoded { embeddings: h, attention })
}

/// `(E_n E_n^T + 1) / 2` over the first `n_real` rows, on the tape.
pub fn link_scores_on_tape<T: Real>(tape: &mut Tape<T>, embeddings: Var, n_real: usize) -> Result<Var> {
    let e = tape.take_rows(embeddings, n_real)?;
    scores_of_rows(tape, e)
}

/// As [`link_scores_on_tape`] over the listed rows only, in that order.
pub fn link_scores_on_rows<T: Real>(tape: &mut Tape<T>, embeddings: Var, rows: &[usize]) -> Result<Var> {
    let e = tape.gather_rows(embeddings, rows)?;
    scores_of_rows(tape, e)
}

/// Rows of the first `n_real` embeddings whose norm is too small to
/// normalize. An embedding can collapse to zero when no encoder follows the
/// final ReLU of the box MLP.
pub fn degenerate_rows<T: Real>(tape: &Tape<T>, embeddings: Var, n_real: usize) -> Vec<usize> {
    let e = tape.value(embeddings);
    (0..n_real.min(e.rows()))
        .filter(|&i| e.row(i).iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt() < MIN_EMBEDDING_NORM)
        .collect()
}

fn scores_of_rows<T: Real>(tape: &mut Tape<T>, e: Var) -> Result<Var> {
    let e = tape.l2_normalize_rows(e)?;
    let s = tape.matmul_nt(e, e)?;
    Ok(tape.affine(s, 0.5, 0.5))
}

/// Feature rows as a tensor, zero-padded to `n_pad` rows.
pub fn feature_tensor<T: Real>(features: &RawFeatureMatrix, n_pad: usize) -> Result<(Tensor<T>, Vec<bool>)> {
    if n_pad < features.n {
        return Err(BottError::domain(format!("cannot pad {} rows down to {n_pad}", features.n)));
    }
    let mut data: Vec<T> = features.values.iter().map(|v| T::of(*v)).collect();
    data.resize(n_pad * features.dim, T::ZERO);
    let mask = (0..n_pad).map(|i| i >= features.n).collect();
    Ok((Tensor::from_vec(&[n_pad, features.dim], data)?, mask))
}

static FORWARDS: AtomicU64 = AtomicU64::new(0);
static CONTRACT_VIOLATIONS: AtomicU64 = AtomicU64::new(0);

/// `(forward passes, linking-score contract violations)` since process start.
pub fn forward_stats() -> (u64, u64) {
    (FORWARDS.load(Ordering::Relaxed), CONTRACT_VIOLATIONS.load(Ordering::Relaxed))
}

/// Symmetric `N x N` linking scores in `[0, 1]` for the boxes of a window,
/// rows in featurizer order.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkScoreMatrix {
    pub n: usize,
    pub values: Vec<f64>,
    pub frame_of: Vec<usize>,
    pub class_of: Vec<usize>,
    pub box_ref: Vec<u64>,
}

impl LinkScoreMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// Range, symmetry and unit-diagonal check.
    pub fn satisfies_contract(&self, tol: f64) -> bool {
        for i in 0..self.n {
            if (self.get(i, i) - 1.0).abs() > tol {
                return false;
            }
            for j in 0..self.n {
                let v = self.get(i, j);
                if !(0.0..=1.0).contains(&v) || (v - self.get(j, i)).abs() > tol {
                    return false;
                }
            }
        }
        true
    }
}

/// Embedding rows shorter than this have no direction.
pub const MIN_EMBEDDING_NORM: f64 = 1e-12;

/// Cosine similarities of embedding rows mapped to `[0, 1]`, in 64-bit.
/// A row without direction (norm below [`MIN_EMBEDDING_NORM`]) is scored as
/// orthogonal to every other row, 0.5, and keeps its unit diagonal.
pub fn linking_scores(embeddings: &[f64], n: usize, d: usize) -> Result<Vec<f64>> {
    if embeddings.len() < n * d {
        return Err(BottError::Shape {
            op: "linking_scores",
            detail: format!("{} values for {n} x {d}", embeddings.len()),
        });
    }
    let mut unit = Vec::with_capacity(n * d);
    for i in 0..n {
        let row = &embeddings[i * d..(i + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < MIN_EMBEDDING_NORM {
            unit.extend(std::iter::repeat(0.0).take(d));
        } else {
            unit.extend(row.iter().map(|v| v / norm));
        }
    }
    let mut ls = vec![0.0; n * n];
    for i in 0..n {
        ls[i * n + i] = 1.0;
        for j in i + 1..n {
            let dot: f64 = unit[i * d..(i + 1) * d].iter().zip(&unit[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum();
            let v = ((dot + 1.0) / 2.0).clamp(0.0, 1.0);
            ls[i * n + j] = v;
            ls[j * n + i] = v;
        }
    }
    Ok(ls)
}

/// Per-block attention weights `(heads, N, weights[heads][N][N])`.
pub type AttentionDump = Vec<(usize, usize, Vec<f32>)>;

/// A network configuration together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T = f32> {
    pub cfg: NetworkConfig,
    pub params: Params<T>,
}

impl<T: Real> Network<T> {
    pub fn new(cfg: NetworkConfig, params: Params<T>) -> Result<Self> {
        cfg.validate()?;
        params.check(&cfg)?;
        Ok(Network { cfg, params })
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
        }
    }

    /// Embeddings of the real rows of `features` after `n_pad - n` padded
    /// rows are appended, as 64-bit values.
    pub fn embed(&self, features: &RawFeatureMatrix, n_pad: usize) -> Result<Vec<f64>> {
        Ok(self.embed_inner(features, n_pad, false)?.0)
    }

    fn embed_inner(
        &self,
        features: &RawFeatureMatrix,
        n_pad: usize,
        keep_attention: bool,
    ) -> Result<(Vec<f64>, Option<AttentionDump>)> {
        let mut tape = Tape::new();
        let p = record_params(&mut tape, &self.params, false);
        let (x, mask) = feature_tensor(features, n_pad)?;
        let enc = encode_boxes(&mut tape, &self.cfg, &p, x, &mask)?;
        let d = self.cfg.d_model();
        let e = tape.value(enc.embeddings);
        let emb = e.data[..features.n * d].iter().map(|v| v.to_f64()).collect();
        let attn = keep_attention.then(|| {
            enc.attention
                .iter()
                .filter_map(|a| tape.attention_weights(*a))
                .map(|(h, n, w)| (h, n, w.iter().map(|v| v.to_f64() as f32).collect()))
                .collect()
        });
        Ok((emb, attn))
    }

    /// Linking scores for precomputed features.
    pub fn link_scores(&self, features: &RawFeatureMatrix) -> Result<LinkScoreMatrix> {
        self.link_scores_padded(features, features.n)
    }

    /// As [`Network::link_scores`] with the input zero-padded to `n_pad` rows.
    pub fn link_scores_padded(&self, features: &RawFeatureMatrix, n_pad: usize) -> Result<LinkScoreMatrix> {
        Ok(self.scores_inner(features, n_pad, false)?.0)
    }

    fn scores_inner(
        &self,
        features: &RawFeatureMatrix,
        n_pad: usize,
        keep_attention: bool,
    ) -> Result<(LinkScoreMatrix, Option<AttentionDump>)> {
        let (emb, attn) = self.embed_inner(features, n_pad, keep_attention)?;
        let values = linking_scores(&emb, features.n, self.cfg.d_model())?;
        let ls = LinkScoreMatrix {
            n: features.n,
            values,
            frame_of: features.frame_of.clone(),
            class_of: features.class_of.clone(),
            box_ref: features.box_ref.clone(),
        };
        FORWARDS.fetch_add(1, Ordering::Relaxed);
        if !ls.satisfies_contract(1e-6) {
            CONTRACT_VIOLATIONS.fetch_add(1, Ordering::Relaxed);
        }
        Ok((ls, attn))
    }

    /// featurize, encode, and score one window.
    pub fn forward(&self, window: &SlidingWindow) -> Result<LinkScoreMatrix> {
        let f = featurize(window)?;
        self.link_scores(&f)
    }

    /// [`Network::forward`] that also returns per-block attention weights.
    pub fn forward_with_attention(&self, window: &SlidingWindow) -> Result<(LinkScoreMatrix, AttentionDump)> {
        let f = featurize(window)?;
        let (ls, attn) = self.scores_inner(&f, f.n, true)?;
        Ok((ls, attn.unwrap_or_default()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Box3D, DetectionFrame};

    fn toy_cfg(n_enc: usize) -> NetworkConfig {
        NetworkConfig {
            input_dim: 12,
            mlp_dims: vec![16, 8],
            n_enc,
            n_heads: 2,
            ffn_dims: vec![16, 8],
        }
    }

    fn toy_window(seed: u64, frames: usize, per_frame: usize) -> SlidingWindow {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut id = 0;
        let fs = (0..frames)
            .map(|k| {
                let mut f = DetectionFrame::new(k as i64, k as f64 * 0.1);
                for _ in 0..per_frame {
                    let mut b = Box3D::new(rng.random_range(0..3), 3);
                    b.box_id = id;
                    id += 1;
                    b.frame_idx = k as i64;
                    b.t = f.t;
                    b.x = rng.random_range(-20.0..20.0);
                    b.y = rng.random_range(-20.0..20.0);
                    b.yaw = rng.random_range(-3.0..3.0);
                    f.boxes.push(b);
                }
                f
            })
            .collect();
        SlidingWindow::new(fs).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let cfg = toy_cfg(1);
        let a = init_params(&cfg, 3).unwrap();
        let b = init_params(&cfg, 3).unwrap();
        assert_eq!(a, b);
        a.check(&cfg).unwrap();
        assert_eq!(a.get("mlp.0.weight").unwrap().shape, vec![12, 16]);
        assert_eq!(a.get("enc.0.ffn.0.weight").unwrap().shape, vec![8, 16]);
        assert!(a.get("enc.0.ln1.gain").unwrap().data.iter().all(|g| *g == 1.0));
        assert!(a.get("mlp.1.bias").unwrap().data.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn xavier_mean_near_zero() {
        let cfg = NetworkConfig {
            input_dim: 400,
            mlp_dims: vec![250],
            n_enc: 0,
            n_heads: 1,
            ffn_dims: vec![],
        };
        let p = init_params(&cfg, 11).unwrap();
        let w = p.get("mlp.0.weight").unwrap();
        assert_eq!(w.len(), 100_000);
        let mean: f64 = w.data.iter().map(|v| *v as f64).sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 0.01, "{mean}");
        let bound = (6.0f64 / 650.0).sqrt() as f32;
        assert!(w.data.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = toy_cfg(1);
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = toy_cfg(1);
        c.ffn_dims = vec![16, 4];
        assert!(c.validate().is_err());
    }

    #[test]
    fn single_box_scores_one() {
        let net = Network::new(toy_cfg(2), init_params(&toy_cfg(2), 1).unwrap()).unwrap();
        let w = toy_window(1, 1, 1);
        let ls = net.forward(&w).unwrap();
        assert_eq!(ls.values, vec![1.0]);
    }

    #[test]
    fn closed_form_scores() {
        let ls = linking_scores(&[1.0, 0.0, 2.0, 0.0, 0.0, 3.0, -1.0, 0.0], 4, 2).unwrap();
        assert_eq!(ls[1], 1.0);
        assert_eq!(ls[2], 0.5);
        assert_eq!(ls[3], 0.0);
        let ls = linking_scores(&[0.0, 0.0, 1.0, 1.0, 0.0, 1e-13], 3, 2).unwrap();
        assert_eq!(ls, vec![1.0, 0.5, 0.5, 0.5, 1.0, 0.5, 0.5, 0.5, 1.0]);
        assert!(linking_scores(&[1.0], 1, 2).is_err());
    }

    #[test]
    fn zero_encoders_is_mlp_only() {
        let cfg = toy_cfg(0);
        let params = init_params(&cfg, 5).unwrap();
        let net = Network::new(cfg.clone(), params.clone()).unwrap();
        let f = featurize(&toy_window(2, 3, 2)).unwrap();
        let emb = net.embed(&f, f.n).unwrap();
        // Direct MLP evaluation.
        let mut h: Vec<f64> = f.values.clone();
        let mut width = f.dim;
        for i in 0..cfg.mlp_dims.len() {
            let w = params.get(&format!("mlp.{i}.weight")).unwrap();
            let b = params.get(&format!("mlp.{i}.bias")).unwrap();
            let out_w = w.cols();
            let mut next = vec![0.0; f.n * out_w];
            for r in 0..f.n {
                for c in 0..out_w {
                    let mut s = b.data[c] as f64;
                    for k in 0..width {
                        s += h[r * width + k] * w.at(k, c) as f64;
                    }
                    next[r * out_w + c] = s.max(0.0);
                }
            }
            h = next;
            width = out_w;
        }
        for (a, b) in emb.iter().zip(&h) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn padding_leaves_real_rows_alone() {
        let cfg = toy_cfg(2);
        let net = Network::new(cfg.clone(), init_params(&cfg, 9).unwrap()).unwrap();
        let f = featurize(&toy_window(3, 4, 3)).unwrap();
        let a = net.link_scores(&f).unwrap();
        let b = net.link_scores_padded(&f, f.n + 10).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn within_frame_permutation_is_equivariant() {
        let cfg = toy_cfg(2);
        let net = Network::new(cfg.clone(), init_params(&cfg, 4).unwrap()).unwrap();
        let w = toy_window(5, 3, 3);
        let mut p = w.clone();
        p.frames[1].boxes.reverse();
        let a = net.forward(&w).unwrap();
        let b = net.forward(&p).unwrap();
        let pos_b: HashMap<u64, usize> = b.box_ref.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        for i in 0..a.n {
            for j in 0..a.n {
                let (bi, bj) = (pos_b[&a.box_ref[i]], pos_b[&a.box_ref[j]]);
                assert!((a.get(i, j) - b.get(bi, bj)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn contract_holds_on_random_windows() {
        let cfg = toy_cfg(1);
        let net = Network::new(cfg.clone(), init_params(&cfg, 2).unwrap()).unwrap();
        for s in 0..5 {
            let ls = net.forward(&toy_window(s, 4, 4)).unwrap();
            assert!(ls.satisfies_contract(1e-6));
        }
    }
}
