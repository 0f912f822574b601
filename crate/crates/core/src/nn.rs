//! Parameter storage, initialization, and the AdamW optimizer.

use crate::ad::{Tape, Var};
use crate::error::{Error, Result};
use crate::seeding;
use crate::tensor::{load_f64, save_f64};
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::path::Path;

/// Named parameter tensors, insertion-ordered for deterministic iteration.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: IndexMap<String, ArrayD<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        assert!(
            self.params.insert(name.to_string(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.params.iter()
    }

    /// Register every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut vars = HashMap::new();
        for (name, value) in &self.params {
            vars.insert(name.clone(), tape.leaf(value.clone()));
        }
        BoundParams { vars }
    }

    /// Content hash over names, shapes, and exact payload bytes.
    pub fn content_hash(&self) -> String {
        let mut names: Vec<&String> = self.params.keys().collect();
        names.sort();
        let mut h = Sha256::new();
        for name in names {
            let arr = &self.params[name.as_str()];
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in arr.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in arr.as_standard_layout().iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let names: Vec<&String> = self.params.keys().collect();
        let index: Vec<serde_json::Value> = names
            .iter()
            .map(|n| serde_json::json!({ "name": n, "file": format!("{}.tns", sanitize(n)) }))
            .collect();
        let index_path = dir.join("params.json");
        std::fs::write(
            &index_path,
            serde_json::to_string_pretty(&index).expect("serializable"),
        )
        .map_err(|e| Error::io(&index_path, e))?;
        for (name, value) in &self.params {
            save_f64(value, &dir.join(format!("{}.tns", sanitize(name))))?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let index_path = dir.join("params.json");
        let text = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let index: Vec<serde_json::Value> =
            serde_json::from_str(&text).map_err(|e| Error::CorruptFile {
                path: index_path.clone(),
                reason: format!("bad params index: {e}"),
            })?;
        let mut set = ParamSet::new();
        for entry in index {
            let name = entry["name"].as_str().ok_or_else(|| Error::CorruptFile {
                path: index_path.clone(),
                reason: "missing name".into(),
            })?;
            let file = entry["file"].as_str().ok_or_else(|| Error::CorruptFile {
                path: index_path.clone(),
                reason: "missing file".into(),
            })?;
            set.insert(name, load_f64(&dir.join(file))?);
        }
        Ok(set)
    }
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

/// Tape variables for a bound parameter set.
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }
}

// ---- initializers ----

pub fn xavier(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> ArrayD<f64> {
    use rand::Rng;
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random::<f64>() * 2.0 * bound - bound)
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn full(shape: &[usize], v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(shape), v)
}

/// Linear layer parameters: weight `[in, out]`, bias `[out]`.
pub fn init_linear(params: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, d_in: usize, d_out: usize) {
    params.insert(&format!("{prefix}.w"), xavier(rng, &[d_in, d_out], d_in, d_out));
    params.insert(&format!("{prefix}.b"), zeros(&[d_out]));
}

pub fn linear(tape: &mut Tape, bound: &BoundParams, prefix: &str, x: Var) -> Var {
    let y = tape.matmul_last(x, bound.var(&format!("{prefix}.w")));
    tape.add_rowvec(y, bound.var(&format!("{prefix}.b")))
}

/// Conv layer parameters: kernel `[co, ci, k, k]`, bias `[co]`.
pub fn init_conv(params: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, ci: usize, co: usize, k: usize) {
    let fan_in = ci * k * k;
    let fan_out = co * k * k;
    params.insert(&format!("{prefix}.k"), xavier(rng, &[co, ci, k, k], fan_in, fan_out));
    params.insert(&format!("{prefix}.b"), zeros(&[co]));
}

pub fn conv(tape: &mut Tape, bound: &BoundParams, prefix: &str, x: Var, stride: usize, pad: usize) -> Var {
    tape.conv2d(
        x,
        bound.var(&format!("{prefix}.k")),
        bound.var(&format!("{prefix}.b")),
        stride,
        pad,
    )
}

// ---- optimizer ----

/// AdamW with decoupled weight decay.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: IndexMap<String, ArrayD<f64>>,
    v: IndexMap<String, ArrayD<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    /// One update. `grads` maps parameter name to gradient; parameters
    /// without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &HashMap<String, ArrayD<f64>>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.dim()));
            *m *= self.beta1;
            *m += &(g * (1.0 - self.beta1));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.dim()));
            *v *= self.beta2;
            *v += &(&(g * g) * (1.0 - self.beta2));
            let p = params.get_mut(&name);
            let mhat = &*m / bc1;
            let vhat = &*v / bc2;
            ndarray::Zip::from(&mut *p)
                .and(&mhat)
                .and(&vhat)
                .for_each(|pv, &mv, &vv| {
                    *pv -= lr * (mv / (vv.sqrt() + self.eps) + self.weight_decay * *pv);
                });
        }
    }
}

/// One-cycle learning-rate schedule: linear warmup to the peak, cosine decay
/// down to peak/100.
pub fn one_cycle_lr(peak: f64, step: usize, total_steps: usize) -> f64 {
    let total = total_steps.max(2) as f64;
    let warmup = (0.1 * total).max(1.0);
    let s = step as f64;
    if s < warmup {
        peak * (0.04 + 0.96 * s / warmup)
    } else {
        let p = ((s - warmup) / (total - warmup).max(1.0)).clamp(0.0, 1.0);
        let floor = peak / 100.0;
        floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// Collect gradients for a parameter set into a name-indexed map.
pub fn collect_grads(
    tape: &Tape,
    grads: &crate::ad::Grads,
    params: &ParamSet,
    bound: &BoundParams,
) -> HashMap<String, ArrayD<f64>> {
    let _ = tape;
    let mut map = HashMap::new();
    for name in params.names() {
        if let Some(g) = grads.of(bound.var(name)) {
            map.insert(name.clone(), g.clone());
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut params = ParamSet::new();
        params.insert("x", full(&[4], 5.0));
        let mut opt = AdamW::new(0.0);
        for _ in 0..400 {
            let g: ArrayD<f64> = params.get("x") * 2.0;
            let mut grads = HashMap::new();
            grads.insert("x".to_string(), g);
            opt.step(&mut params, &grads, 0.05);
        }
        assert!(params.get("x").iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn paramset_roundtrip_and_hash() {
        let mut rng = seeding::stream(3, "nn-test", 0);
        let mut params = ParamSet::new();
        init_linear(&mut params, &mut rng, "fc", 4, 3);
        let h1 = params.content_hash();
        let dir = tempfile::tempdir().unwrap();
        params.save_dir(dir.path()).unwrap();
        let back = ParamSet::load_dir(dir.path()).unwrap();
        assert_eq!(back.content_hash(), h1);
        assert_eq!(back.get("fc.w"), params.get("fc.w"));
    }

    #[test]
    fn one_cycle_shape() {
        let peak = 3e-4;
        assert!(one_cycle_lr(peak, 0, 100) < peak);
        let mid = one_cycle_lr(peak, 10, 100);
        assert!((mid - peak).abs() < 1e-12, "peak at warmup end, got {mid}");
        assert!(one_cycle_lr(peak, 99, 100) < 0.1 * peak);
    }
}
