//! Multi-expert MLP: a shared ReLU backbone feeding `K` independent heads,
//! each ending in `C` logits.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, LayerShape};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Matrix, RngState};

/// Layer widths of an [`ExpertModel`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    /// Hidden widths of the shared backbone; empty means identity.
    pub backbone: Vec<usize>,
    /// Hidden widths of every expert head before its linear output layer.
    pub head: Vec<usize>,
    pub experts: usize,
    pub classes: usize,
}

impl ModelSpec {
    /// Backbone of `backbone_widths`, one hidden head layer of half the last
    /// backbone width, and `experts` heads.
    pub fn with_half_width_heads(
        input_dim: usize,
        backbone_widths: Vec<usize>,
        experts: usize,
        classes: usize,
    ) -> Self {
        let head = match backbone_widths.last() {
            Some(&w) => vec![(w / 2).max(1)],
            None => Vec::new(),
        };
        Self {
            input_dim,
            backbone: backbone_widths,
            head,
            experts,
            classes,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.last().copied().unwrap_or(self.input_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.experts < 2 {
            return Err(Error::Domain(format!("need at least 2 experts, got {}", self.experts)));
        }
        if self.classes < 2 {
            return Err(Error::Domain(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.input_dim == 0 || self.backbone.iter().chain(&self.head).any(|&w| w == 0) {
            return Err(Error::Domain("layer widths must be positive".into()));
        }
        Ok(())
    }

    fn backbone_dims(&self) -> Vec<(usize, usize)> {
        let mut fan_in = self.input_dim;
        self.backbone
            .iter()
            .map(|&w| {
                let d = (fan_in, w);
                fan_in = w;
                d
            })
            .collect()
    }

    fn head_dims(&self) -> Vec<(usize, usize)> {
        let mut fan_in = self.feature_dim();
        self.head
            .iter()
            .chain(std::iter::once(&self.classes))
            .map(|&w| {
                let d = (fan_in, w);
                fan_in = w;
                d
            })
            .collect()
    }
}

/// Fully connected layer `y = x·W + b` with `W` stored `fan_in × fan_out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weights: Matrix::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
        }
    }

    fn glorot(fan_in: usize, fan_out: usize, rng: &mut RngState) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut layer = Self::zeros(fan_in, fan_out);
        for w in layer.weights.data_mut() {
            *w = rng.uniform_range(-limit, limit);
        }
        layer
    }

    fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul(&self.weights)?;
        out.add_row_vector(&self.bias)?;
        Ok(out)
    }
}

fn relu_in_place(m: &mut Matrix) {
    for x in m.data_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Parameter tensors laid out like the model; also used for gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub backbone: Vec<Dense>,
    pub heads: Vec<Vec<Dense>>,
}

/// Gradients share the parameter layout.
pub type ParamGrads = Params;

impl Params {
    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            backbone: spec.backbone_dims().into_iter().map(|(i, o)| Dense::zeros(i, o)).collect(),
            heads: (0..spec.experts)
                .map(|_| spec.head_dims().into_iter().map(|(i, o)| Dense::zeros(i, o)).collect())
                .collect(),
        }
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.backbone.iter().chain(self.heads.iter().flatten())
    }

    /// Tensors in checkpoint order: backbone layers, then heads 1..K; each
    /// layer contributes its weights (row-major) followed by its bias.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers()
            .flat_map(|l| [l.weights.data(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.backbone
            .iter_mut()
            .chain(self.heads.iter_mut().flatten())
            .flat_map(|l| [l.weights.data_mut(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.len()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// Activations cached by [`ExpertModel::forward`] for one batch.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input followed by each backbone layer's post-ReLU output.
    backbone: Vec<Matrix>,
    /// Per expert, the post-ReLU output of each hidden head layer.
    heads: Vec<Vec<Matrix>>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.backbone[0].rows()
    }

    /// Shared backbone output.
    pub fn features(&self) -> &Matrix {
        self.backbone.last().expect("trace holds the input")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertModel {
    spec: ModelSpec,
    params: Params,
}

impl ExpertModel {
    /// Glorot-uniform weights and zero biases, drawn backbone first then
    /// head by head.
    pub fn init(spec: ModelSpec, rng: &mut RngState) -> Result<Self> {
        spec.validate()?;
        let backbone = spec
            .backbone_dims()
            .into_iter()
            .map(|(i, o)| Dense::glorot(i, o, rng))
            .collect();
        let heads = (0..spec.experts)
            .map(|_| {
                spec.head_dims()
                    .into_iter()
                    .map(|(i, o)| Dense::glorot(i, o, rng))
                    .collect()
            })
            .collect();
        Ok(Self {
            spec,
            params: Params { backbone, heads },
        })
    }

    pub fn from_params(spec: ModelSpec, params: Params) -> Result<Self> {
        spec.validate()?;
        let template = Params::zeros(&spec);
        let shapes = |p: &Params| -> Vec<(usize, usize)> {
            p.layers().map(|l| l.weights.shape()).collect()
        };
        if shapes(&template) != shapes(&params)
            || template.layers().zip(params.layers()).any(|(a, b)| a.bias.len() != b.bias.len())
        {
            return Err(Error::Shape("parameters do not match the model spec".into()));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn experts(&self) -> usize {
        self.spec.experts
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Per-expert logits (`batch × C` each) and the activations needed for
    /// [`ExpertModel::backward`].
    pub fn forward(&self, x: &Matrix) -> Result<(Vec<Matrix>, ForwardTrace)> {
        if x.cols() != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "input has {} features, model expects {}",
                x.cols(),
                self.spec.input_dim
            )));
        }
        let mut backbone = vec![x.clone()];
        for layer in &self.params.backbone {
            let mut h = layer.apply(backbone.last().expect("non-empty"))?;
            relu_in_place(&mut h);
            backbone.push(h);
        }
        let features = backbone.last().expect("non-empty");
        let mut logits = Vec::with_capacity(self.spec.experts);
        let mut heads = Vec::with_capacity(self.spec.experts);
        for head in &self.params.heads {
            let (out, hidden) = head.split_last().expect("head has an output layer");
            let mut acts: Vec<Matrix> = Vec::with_capacity(hidden.len());
            for layer in hidden {
                let mut h = layer.apply(acts.last().unwrap_or(features))?;
                relu_in_place(&mut h);
                acts.push(h);
            }
            logits.push(out.apply(acts.last().unwrap_or(features))?);
            heads.push(acts);
        }
        Ok((logits, ForwardTrace { backbone, heads }))
    }

    /// Per-expert logits without keeping a trace.
    pub fn expert_logits(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        Ok(self.forward(x)?.0)
    }

    /// Exact gradients of `Σ_k L_k` given `∂L_k/∂v_k` for every expert. The
    /// backbone receives the sum of all head contributions.
    pub fn backward(&self, trace: ForwardTrace, grad_logits: &[Matrix]) -> Result<ParamGrads> {
        let batch = trace.batch_size();
        if grad_logits.len() != self.spec.experts || trace.heads.len() != self.spec.experts {
            return Err(Error::Shape(format!(
                "{} logit gradients for {} experts",
                grad_logits.len(),
                self.spec.experts
            )));
        }
        if let Some(g) = grad_logits.iter().find(|g| g.shape() != (batch, self.spec.classes)) {
            return Err(Error::Shape(format!(
                "logit gradient of shape {:?}, expected ({batch}, {})",
                g.shape(),
                self.spec.classes
            )));
        }
        let mut grads = Params::zeros(&self.spec);
        let features = trace.features();
        let mut d_features = Matrix::zeros(batch, self.spec.feature_dim());

        for (k, head) in self.params.heads.iter().enumerate() {
            let acts = &trace.heads[k];
            let mut delta = grad_logits[k].clone();
            for l in (0..head.len()).rev() {
                let input = if l == 0 { features } else { &acts[l - 1] };
                let g = &mut grads.heads[k][l];
                g.weights = input.t_matmul(&delta)?;
                g.bias = delta.column_sums();
                let mut d_input = delta.matmul_t(&head[l].weights)?;
                if l == 0 {
                    for (d, s) in d_features.data_mut().iter_mut().zip(d_input.data()) {
                        *d += s;
                    }
                } else {
                    mask_relu(&mut d_input, input);
                    delta = d_input;
                }
            }
        }

        let mut delta = d_features;
        for i in (0..self.params.backbone.len()).rev() {
            mask_relu(&mut delta, &trace.backbone[i + 1]);
            let input = &trace.backbone[i];
            let g = &mut grads.backbone[i];
            g.weights = input.t_matmul(&delta)?;
            g.bias = delta.column_sums();
            if i > 0 {
                delta = delta.matmul_t(&self.params.backbone[i].weights)?;
            }
        }
        Ok(grads)
    }

    /// Rowwise `softmax(Σ_k w_k·v_k)`.
    pub fn predict(&self, x: &Matrix, weights: &[f64]) -> Result<Matrix> {
        Ok(ensemble_logits(&self.expert_logits(x)?, weights)?.softmax_rows())
    }
}

/// Zeroes gradient entries whose ReLU output was not positive.
fn mask_relu(grad: &mut Matrix, post_activation: &Matrix) {
    for (g, a) in grad.data_mut().iter_mut().zip(post_activation.data()) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Checks that `weights` is a length-`k` point on the simplex (sum within 1e-9).
pub fn check_simplex(weights: &[f64], k: usize) -> Result<()> {
    if weights.len() != k {
        return Err(Error::Contract(format!("{} weights for {k} experts", weights.len())));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::Contract(format!("weights {weights:?} must be finite and >= 0")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("weights sum to {total}, expected 1")));
    }
    Ok(())
}

/// `Σ_k w_k·v_k` over per-expert logit matrices.
pub fn ensemble_logits(expert_logits: &[Matrix], weights: &[f64]) -> Result<Matrix> {
    check_simplex(weights, expert_logits.len())?;
    let shape = expert_logits[0].shape();
    if expert_logits.iter().any(|v| v.shape() != shape) {
        return Err(Error::Shape("expert logits differ in shape".into()));
    }
    let mut out = Matrix::zeros(shape.0, shape.1);
    for (v, &w) in expert_logits.iter().zip(weights) {
        for (o, x) in out.data_mut().iter_mut().zip(v.data()) {
            *o += w * x;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::ce_loss;
    use crate::numkit::finite_diff_grad;

    fn small_spec(experts: usize) -> ModelSpec {
        ModelSpec {
            input_dim: 3,
            backbone: vec![5, 4],
            head: vec![3],
            experts,
            classes: 3,
        }
    }

    fn random_input(rng: &mut RngState, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = ExpertModel::init(small_spec(3), &mut RngState::new(4, 0)).unwrap();
        let b = ExpertModel::init(small_spec(3), &mut RngState::new(4, 0)).unwrap();
        assert_eq!(a, b);
        let c = ExpertModel::init(small_spec(3), &mut RngState::new(5, 0)).unwrap();
        assert_ne!(a, c);
        assert!(a.params().backbone.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn init_weight_scale() {
        let spec = ModelSpec {
            input_dim: 200,
            backbone: vec![300],
            head: vec![],
            experts: 2,
            classes: 10,
        };
        let m = ExpertModel::init(spec, &mut RngState::new(1, 0)).unwrap();
        let w = m.params().backbone[0].weights.data();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        // U(−a, a) with a = √(6/500) has standard deviation a/√3
        let theory = (6.0f64 / 500.0).sqrt() / 3f64.sqrt();
        assert!((std / theory - 1.0).abs() < 0.1, "std {std} vs {theory}");
    }

    #[test]
    fn init_rejects_bad_specs() {
        assert!(ExpertModel::init(small_spec(1), &mut RngState::new(0, 0)).is_err());
        let mut spec = small_spec(2);
        spec.classes = 1;
        assert!(ExpertModel::init(spec, &mut RngState::new(0, 0)).is_err());
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let spec = small_spec(3);
        let m = ExpertModel::from_params(spec.clone(), Params::zeros(&spec)).unwrap();
        let (logits, _) = m.forward(&Matrix::from_rows(&[[0.3, -1.0, 2.0]]).unwrap()).unwrap();
        assert!(logits.iter().all(|v| v.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn duplicated_rows_give_duplicated_logits() {
        let m = ExpertModel::init(small_spec(2), &mut RngState::new(2, 0)).unwrap();
        let x = Matrix::from_rows(&[[0.5, -0.2, 1.0], [0.5, -0.2, 1.0]]).unwrap();
        for v in m.expert_logits(&x).unwrap() {
            assert_eq!(v.row(0), v.row(1));
        }
        assert!(m.forward(&Matrix::zeros(1, 4)).is_err());
    }

    #[test]
    fn linear_model_is_a_matrix_product() {
        let spec = ModelSpec {
            input_dim: 4,
            backbone: vec![],
            head: vec![],
            experts: 2,
            classes: 3,
        };
        let m = ExpertModel::init(spec, &mut RngState::new(3, 0)).unwrap();
        let x = random_input(&mut RngState::new(4, 0), 5, 4);
        let logits = m.expert_logits(&x).unwrap();
        for (k, v) in logits.iter().enumerate() {
            let expected = x.matmul(&m.params().heads[k][0].weights).unwrap();
            assert_eq!(v, &expected);
        }
    }

    #[test]
    fn zero_logit_grads_give_zero_param_grads() {
        let m = ExpertModel::init(small_spec(3), &mut RngState::new(6, 0)).unwrap();
        let x = random_input(&mut RngState::new(7, 0), 4, 3);
        let (_, trace) = m.forward(&x).unwrap();
        let zero = vec![Matrix::zeros(4, 3); 3];
        let g = m.backward(trace, &zero).unwrap();
        assert!(g.to_flat().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn linear_ce_gradient_closed_form() {
        let spec = ModelSpec {
            input_dim: 3,
            backbone: vec![],
            head: vec![],
            experts: 2,
            classes: 4,
        };
        let m = ExpertModel::init(spec, &mut RngState::new(8, 0)).unwrap();
        let x = random_input(&mut RngState::new(9, 0), 6, 3);
        let labels = [0, 3, 1, 2, 2, 0];
        let (logits, trace) = m.forward(&x).unwrap();
        let loss = ce_loss(&logits[0], &labels).unwrap();
        let grads = m
            .backward(trace, &[loss.grad_logits.clone(), Matrix::zeros(6, 4)])
            .unwrap();
        // xᵀ(σ(v) − onehot)/batch
        let mut residual = logits[0].softmax_rows();
        for (i, &y) in labels.iter().enumerate() {
            residual.set(i, y, residual.get(i, y) - 1.0);
        }
        residual.scale(1.0 / 6.0);
        let expected = x.transpose().matmul(&residual).unwrap();
        for (a, b) in grads.heads[0][0].weights.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(grads.heads[1][0].weights.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_rejects_mismatched_grads() {
        let m = ExpertModel::init(small_spec(2), &mut RngState::new(0, 0)).unwrap();
        let (_, trace) = m.forward(&Matrix::zeros(2, 3)).unwrap();
        assert!(m.backward(trace.clone(), &[Matrix::zeros(2, 3)]).is_err());
        assert!(m.backward(trace, &[Matrix::zeros(2, 3), Matrix::zeros(3, 3)]).is_err());
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        let spec = small_spec(3);
        let labels = [0, 1, 2, 1];
        let mut rng = RngState::new(10, 0);
        let mut base = ExpertModel::init(spec.clone(), &mut rng).unwrap();
        assert!(base.param_count() <= 500);
        // zero biases can place a pre-activation exactly on the ReLU kink
        let jittered: Vec<f64> = base
            .params()
            .to_flat()
            .iter()
            .map(|p| p + rng.uniform_range(-0.1, 0.1))
            .collect();
        base.params_mut().set_flat(&jittered).unwrap();
        let x = random_input(&mut rng, 4, 3);
        // random linear functional of the logits keeps every expert involved
        let probes: Vec<Matrix> = (0..3).map(|_| random_input(&mut rng, 4, 3)).collect();
        let objective = |flat: &[f64]| {
            let mut m = base.clone();
            m.params_mut().set_flat(flat).unwrap();
            let logits = m.expert_logits(&x).unwrap();
            ce_loss(&logits[0], &labels).unwrap().value
                + logits[1].data().iter().zip(probes[1].data()).map(|(a, b)| a * b).sum::<f64>()
                + logits[2].data().iter().zip(probes[2].data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (logits, trace) = base.forward(&x).unwrap();
        let g_ce = ce_loss(&logits[0], &labels).unwrap().grad_logits;
        let analytic = base
            .backward(trace, &[g_ce, probes[1].clone(), probes[2].clone()])
            .unwrap()
            .to_flat();
        let numeric = finite_diff_grad(objective, &base.params().to_flat(), 1e-6).unwrap();
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            assert!((a - n).abs() <= 1e-5 * a.abs().max(n.abs()) + 1e-8, "{i}: {a} vs {n}");
        }
    }

    #[test]
    fn ensemble_examples() {
        let mut rng = RngState::new(12, 0);
        let v = random_input(&mut rng, 3, 4);
        let same = ensemble_logits(&[v.clone(), v.clone(), v.clone()], &[1.0 / 3.0; 3]).unwrap();
        for (a, b) in same.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        let vs: Vec<Matrix> = (0..3).map(|_| random_input(&mut rng, 3, 4)).collect();
        for k in 0..3 {
            let mut w = [0.0; 3];
            w[k] = 1.0;
            assert_eq!(ensemble_logits(&vs, &w).unwrap(), vs[k]);
        }
        let w = [0.5, 0.3, 0.2];
        let mixed = ensemble_logits(&vs, &w).unwrap();
        for i in 0..12 {
            let expected = 0.5 * vs[0].data()[i] + 0.3 * vs[1].data()[i] + 0.2 * vs[2].data()[i];
            assert!((mixed.data()[i] - expected).abs() < 1e-15);
        }
        assert!(matches!(ensemble_logits(&vs, &[0.5, 0.3, 0.3]), Err(Error::Contract(_))));
        assert!(matches!(ensemble_logits(&vs, &[1.2, -0.2, 0.0]), Err(Error::Contract(_))));
        assert!(matches!(ensemble_logits(&vs, &[0.5, 0.5]), Err(Error::Contract(_))));
    }

    #[test]
    fn predict_properties() {
        let m = ExpertModel::init(small_spec(3), &mut RngState::new(13, 0)).unwrap();
        let x = random_input(&mut RngState::new(14, 0), 8, 3);
        let p = m.predict(&x, &[0.2, 0.5, 0.3]).unwrap();
        for row in p.row_iter() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            assert!(row.iter().all(|&q| q >= 0.0));
        }
        let single = m.predict(&x, &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(single, m.expert_logits(&x).unwrap()[1].softmax_rows());
    }

    #[test]
    fn symmetric_model_predicts_uniform() {
        let spec = ModelSpec {
            input_dim: 2,
            backbone: vec![3],
            head: vec![],
            experts: 2,
            classes: 2,
        };
        let mut m = ExpertModel::init(spec, &mut RngState::new(1, 0)).unwrap();
        for head in &mut m.params_mut().heads {
            let w = &mut head[0].weights;
            for r in 0..w.rows() {
                let v = w.get(r, 0);
                w.set(r, 1, v);
            }
        }
        let x = random_input(&mut RngState::new(2, 0), 4, 2);
        for row in m.predict(&x, &[0.5, 0.5]).unwrap().row_iter() {
            assert_eq!(row, &[0.5, 0.5]);
        }
    }
}
