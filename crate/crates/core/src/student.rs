//! Feed-forward student network.
//!
//! ```text
//! X ─ backbone (affine, ReLU, …, affine) ─ S_ori ─┬─ classifier (affine) ──────────────── W^s
//!                                                 └─ projection (affine, ReLU, affine) ── F_ori
//! ```

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Matrix, Tape, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentConfig {
    pub input_dim: usize,
    pub backbone_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub n_classes: usize,
    pub teacher_dim: usize,
    pub init_seed: u64,
}

impl StudentConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("input_dim", self.input_dim),
            ("feature_dim", self.feature_dim),
            ("n_classes", self.n_classes),
            ("teacher_dim", self.teacher_dim),
        ];
        for (name, w) in widths {
            if w == 0 {
                return Err(Error::Validation(format!("student {name} must be >= 1")));
            }
        }
        if let Some(i) = self.backbone_hidden.iter().position(|&w| w == 0) {
            return Err(Error::Validation(format!(
                "student backbone_hidden[{i}] must be >= 1"
            )));
        }
        Ok(())
    }

    fn backbone_widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.backbone_hidden.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.backbone_hidden);
        w.push(self.feature_dim);
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
}

impl Param {
    pub fn is_bias(&self) -> bool {
        self.name.ends_with(".bias")
    }
}

/// All trainable tensors in a fixed order:
/// backbone layers, classifier, then the two projection layers; each as
/// weight (`in × out`) followed by bias (`1 × out`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentParams {
    pub params: Vec<Param>,
    pub backbone_layers: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct StudentOutputs {
    pub s_ori: Var,
    pub f_ori: Var,
    pub logits: Var,
}

pub fn init_student(cfg: &StudentConfig) -> Result<StudentParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let mut params = Vec::new();
    let mut layer = |name: String, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| {
        let bound = glorot_bound(fan_in, fan_out);
        params.push(Param {
            name: format!("{name}.weight"),
            value: Matrix::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-bound..=bound)),
        });
        params.push(Param {
            name: format!("{name}.bias"),
            value: Matrix::zeros(1, fan_out),
        });
    };
    let widths = cfg.backbone_widths();
    for (i, w) in widths.windows(2).enumerate() {
        layer(format!("backbone.{i}"), w[0], w[1], &mut rng);
    }
    layer(
        "classifier".into(),
        cfg.feature_dim,
        cfg.n_classes,
        &mut rng,
    );
    layer(
        "projection.0".into(),
        cfg.feature_dim,
        cfg.teacher_dim,
        &mut rng,
    );
    layer(
        "projection.1".into(),
        cfg.teacher_dim,
        cfg.teacher_dim,
        &mut rng,
    );
    Ok(StudentParams {
        params,
        backbone_layers: widths.len() - 1,
    })
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl StudentParams {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn values(&self) -> Vec<Matrix> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Same structure with the given values, in parameter order.
    pub fn with_values(&self, values: Vec<Matrix>) -> Result<StudentParams> {
        if values.len() != self.params.len() {
            return Err(Error::shape(
                "with_values",
                format!("{} values for {} params", values.len(), self.params.len()),
            ));
        }
        let params = self
            .params
            .iter()
            .zip(values)
            .map(|(p, v)| {
                if v.shape() != p.value.shape() {
                    return Err(Error::shape(
                        "with_values",
                        format!("{}: {:?} vs {:?}", p.name, v.shape(), p.value.shape()),
                    ));
                }
                Ok(Param {
                    name: p.name.clone(),
                    value: v,
                })
            })
            .collect::<Result<_>>()?;
        Ok(StudentParams {
            params,
            backbone_layers: self.backbone_layers,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    pub fn input_dim(&self) -> usize {
        self.params[0].value.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.params[2 * self.backbone_layers].value.cols()
    }

    pub fn teacher_dim(&self) -> usize {
        self.params[2 * self.backbone_layers + 2].value.cols()
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect()
    }

    /// Registers every parameter as a constant.
    pub fn register_constant(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.constant(p.value.clone()))
            .collect()
    }

    /// Forward pass using parameter vars from [`register`](Self::register).
    pub fn forward_with(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<StudentOutputs> {
        if vars.len() != self.params.len() {
            return Err(Error::shape(
                "student forward",
                format!("{} vars for {} params", vars.len(), self.params.len()),
            ));
        }
        let affine = |tape: &mut Tape, input: Var, layer: usize| -> Result<Var> {
            let h = tape.matmul(input, vars[2 * layer])?;
            tape.add_row_bias(h, vars[2 * layer + 1])
        };
        let mut h = x;
        for layer in 0..self.backbone_layers {
            h = affine(tape, h, layer)?;
            if layer + 1 < self.backbone_layers {
                h = tape.relu(h);
            }
        }
        let s_ori = h;
        let logits = affine(tape, s_ori, self.backbone_layers)?;
        let p = affine(tape, s_ori, self.backbone_layers + 1)?;
        let p = tape.relu(p);
        let f_ori = affine(tape, p, self.backbone_layers + 2)?;
        Ok(StudentOutputs {
            s_ori,
            f_ori,
            logits,
        })
    }

    pub fn gradients(&self, grads: &Gradients, vars: &[Var]) -> Vec<Matrix> {
        vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }
}

/// Value-level forward: `(S_ori, F_ori, W^s)`.
pub fn forward(params: &StudentParams, x: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
    if x.cols() != params.input_dim() {
        return Err(Error::shape(
            "student forward",
            format!("input dim {} vs expected {}", x.cols(), params.input_dim()),
        ));
    }
    let mut tape = Tape::new();
    let vars = params.register_constant(&mut tape);
    let xv = tape.constant(x.clone());
    let out = params.forward_with(&mut tape, &vars, xv)?;
    Ok((
        tape.value(out.s_ori).clone(),
        tape.value(out.f_ori).clone(),
        tape.value(out.logits).clone(),
    ))
}

#[derive(Debug, Serialize, Deserialize)]
struct ShapeEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ShapeIndex {
    backbone_layers: usize,
    tensors: Vec<ShapeEntry>,
}

/// Writes `<stem>.f64` (raw little-endian values) and `<stem>.json` (shape index).
pub fn save_matrices(
    dir: &Path,
    stem: &str,
    named: &[(String, Matrix)],
    backbone_layers: usize,
) -> Result<()> {
    let mut bytes = Vec::new();
    let mut tensors = Vec::with_capacity(named.len());
    let mut offset = 0;
    for (name, m) in named {
        tensors.push(ShapeEntry {
            name: name.clone(),
            rows: m.rows(),
            cols: m.cols(),
            offset,
        });
        offset += m.len();
        for v in m.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let index = ShapeIndex {
        backbone_layers,
        tensors,
    };
    let bin = dir.join(format!("{stem}.f64"));
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let json = dir.join(format!("{stem}.json"));
    let text = serde_json::to_vec_pretty(&index).map_err(|e| Error::Json {
        file: json.display().to_string(),
        source: e,
    })?;
    fs::write(&json, text).map_err(|e| Error::io(&json, e))
}

pub fn load_matrices(dir: &Path, stem: &str) -> Result<(Vec<(String, Matrix)>, usize)> {
    let json = dir.join(format!("{stem}.json"));
    let text = fs::read(&json).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(json.clone()),
        _ => Error::io(&json, e),
    })?;
    let index: ShapeIndex = serde_json::from_slice(&text).map_err(|e| Error::Json {
        file: json.display().to_string(),
        source: e,
    })?;
    let bin = dir.join(format!("{stem}.f64"));
    let bytes = fs::read(&bin).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(bin.clone()),
        _ => Error::io(&bin, e),
    })?;
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let total: usize = index.tensors.iter().map(|t| t.rows * t.cols).sum();
    if bytes.len() != total * 8 {
        return Err(Error::Format {
            file: bin.display().to_string(),
            detail: format!(
                "{} bytes, shape index implies {} f64 values",
                bytes.len(),
                total
            ),
        });
    }
    let mut out = Vec::with_capacity(index.tensors.len());
    for t in index.tensors {
        let n = t.rows * t.cols;
        let slice = values
            .get(t.offset..t.offset + n)
            .ok_or_else(|| Error::Format {
                file: bin.display().to_string(),
                detail: format!("tensor {} exceeds file", t.name),
            })?;
        out.push((t.name, Matrix::new(t.rows, t.cols, slice.to_vec())?));
    }
    Ok((out, index.backbone_layers))
}

pub fn save_params(params: &StudentParams, dir: &Path) -> Result<()> {
    let named: Vec<(String, Matrix)> = params
        .params
        .iter()
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect();
    save_matrices(dir, "params", &named, params.backbone_layers)
}

pub fn load_params(dir: &Path) -> Result<StudentParams> {
    let (named, backbone_layers) = load_matrices(dir, "params")?;
    Ok(StudentParams {
        params: named
            .into_iter()
            .map(|(name, value)| Param { name, value })
            .collect(),
        backbone_layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> StudentConfig {
        StudentConfig {
            input_dim: 5,
            backbone_hidden: vec![7],
            feature_dim: 4,
            n_classes: 3,
            teacher_dim: 6,
            init_seed: 42,
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_bias_and_bounded_weights() {
        let a = init_student(&cfg()).unwrap();
        assert_eq!(a, init_student(&cfg()).unwrap());
        let names: Vec<&str> = a.params.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "backbone.0.weight",
                "backbone.0.bias",
                "backbone.1.weight",
                "backbone.1.bias",
                "classifier.weight",
                "classifier.bias",
                "projection.0.weight",
                "projection.0.bias",
                "projection.1.weight",
                "projection.1.bias",
            ]
        );
        for p in &a.params {
            if p.is_bias() {
                assert!(p.value.data().iter().all(|&v| v == 0.0));
            } else {
                let bound = glorot_bound(p.value.rows(), p.value.cols());
                assert!(p.value.data().iter().all(|v| v.abs() <= bound));
            }
        }
        assert_eq!(a.input_dim(), 5);
        assert_eq!(a.n_classes(), 3);
        assert_eq!(a.teacher_dim(), 6);
    }

    #[test]
    fn invalid_width_rejected() {
        let bad = StudentConfig {
            backbone_hidden: vec![3, 0],
            ..cfg()
        };
        assert!(matches!(init_student(&bad), Err(Error::Validation(_))));
    }

    #[test]
    fn zero_params_give_zero_outputs() {
        let p = init_student(&cfg()).unwrap();
        let zero = p
            .with_values(
                p.params
                    .iter()
                    .map(|q| Matrix::zeros(q.value.rows(), q.value.cols()))
                    .collect(),
            )
            .unwrap();
        let x = Matrix::from_fn(3, 5, |r, c| (r + c) as f64);
        let (s, f, w) = forward(&zero, &x).unwrap();
        assert_eq!(s, Matrix::zeros(3, 4));
        assert_eq!(f, Matrix::zeros(3, 6));
        assert_eq!(w, Matrix::zeros(3, 3));
    }

    #[test]
    fn single_layer_hand_case() {
        let cfg = StudentConfig {
            input_dim: 2,
            backbone_hidden: vec![],
            feature_dim: 2,
            n_classes: 2,
            teacher_dim: 2,
            init_seed: 0,
        };
        let p = init_student(&cfg).unwrap();
        let eye = Matrix::identity(2);
        let b = Matrix::from_rows(&[[0.5, -1.0]]).unwrap();
        let p = p
            .with_values(vec![
                eye.clone(),
                Matrix::zeros(1, 2),
                eye.clone(),
                b.clone(),
                eye.clone(),
                b,
                eye,
                Matrix::zeros(1, 2),
            ])
            .unwrap();
        let x = Matrix::from_rows(&[[2.0, 0.25]]).unwrap();
        let (s, f, w) = forward(&p, &x).unwrap();
        assert_eq!(s.row(0), &[2.0, 0.25]);
        assert_eq!(w.row(0), &[2.5, -0.75]);
        // relu([2.5, -0.75]) = [2.5, 0]
        assert_eq!(f.row(0), &[2.5, 0.0]);
    }

    #[test]
    fn input_dim_mismatch() {
        let p = init_student(&cfg()).unwrap();
        assert!(forward(&p, &Matrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn params_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = init_student(&cfg()).unwrap();
        save_params(&p, dir.path()).unwrap();
        assert_eq!(load_params(dir.path()).unwrap(), p);
    }
}
