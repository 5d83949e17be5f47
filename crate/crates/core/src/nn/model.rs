//! Trunk, per-task projections and heads, and per-category domain discriminators.
//!
//! The trunk maps an observation to an `N`-dim feature `h`. Each category `c`
//! owns a projection `f_c = P_c h + q_c` (`N'`-dim) and a head
//! `p_c = logistic(w_c · f_c + b_c)`. Each common category additionally owns a
//! three-layer discriminator over `f_c`; the optional holistic discriminator
//! reads `h` directly.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dense::{leaky_relu, leaky_relu_backward, logistic, Dense};
use super::NnError;
use crate::labels::CategoryId;

/// Shape descriptor; everything needed to rebuild zeroed parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    /// Output widths of the trunk layers; the last one is `N`.
    pub trunk_widths: Vec<usize>,
    /// `N'`, width of each per-task feature.
    pub projection_dim: usize,
    pub categories: usize,
    /// Categories that receive a discriminator.
    pub common: Vec<CategoryId>,
    pub disc_hidden: [usize; 2],
    pub holistic: bool,
}

impl Architecture {
    /// Defaults: trunk `[64, 64]`, `N' = 16`, discriminator widths `[N', N'/2]`.
    pub fn new(input_dim: usize, categories: usize, common: Vec<CategoryId>) -> Self {
        Self {
            input_dim,
            trunk_widths: vec![64, 64],
            projection_dim: 16,
            categories,
            common,
            disc_hidden: [16, 8],
            holistic: false,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.trunk_widths.last().copied().unwrap_or(self.input_dim)
    }
}

/// Three dense layers with two leaky rectifiers, ending in one logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub layers: [Dense; 3],
}

impl Discriminator {
    fn build(input: usize, hidden: [usize; 2], mut make: impl FnMut(usize, usize) -> Dense) -> Self {
        Self {
            layers: [
                make(input, hidden[0]),
                make(hidden[0], hidden[1]),
                make(hidden[1], 1),
            ],
        }
    }

    /// Freshly initialized discriminator for `input`-wide features.
    pub fn init<R: rand::Rng>(input: usize, hidden: [usize; 2], rng: &mut R) -> Self {
        Self::build(input, hidden, |i, o| Dense::init(i, o, rng))
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> DiscForward {
        let input = x.to_owned();
        let pre1 = self.layers[0].forward(&input);
        let act1 = leaky_relu(&pre1);
        let pre2 = self.layers[1].forward(&act1);
        let act2 = leaky_relu(&pre2);
        let logits = self.layers[2].forward(&act2).column(0).to_owned();
        let probs = logits.mapv(logistic).to_vec();
        DiscForward {
            probs,
            cache: DiscCache {
                input,
                pre1,
                act1,
                pre2,
                act2,
            },
        }
    }

    /// Backprop of `dL/dprob`; accumulates into `grad`, returns `dL/dinput`.
    pub fn backward(
        &self,
        fwd: &DiscForward,
        d_probs: &[f64],
        grad: &mut Discriminator,
    ) -> Result<Array2<f64>, NnError> {
        let c = &fwd.cache;
        if d_probs.len() != fwd.probs.len() {
            return Err(NnError::CacheMismatch(format!(
                "{} discriminator seeds for batch of {}",
                d_probs.len(),
                fwd.probs.len()
            )));
        }
        let d_logit = Array2::from_shape_fn((d_probs.len(), 1), |(i, _)| {
            let p = fwd.probs[i];
            d_probs[i] * p * (1.0 - p)
        });
        let d_act2 = self.layers[2].backward(&c.act2, &d_logit, &mut grad.layers[2]);
        let d_pre2 = leaky_relu_backward(&c.pre2, &d_act2);
        let d_act1 = self.layers[1].backward(&c.act1, &d_pre2, &mut grad.layers[1]);
        let d_pre1 = leaky_relu_backward(&c.pre1, &d_act1);
        Ok(self.layers[0].backward(&c.input, &d_pre1, &mut grad.layers[0]))
    }
}

#[derive(Debug, Clone)]
pub struct DiscCache {
    input: Array2<f64>,
    pre1: Array2<f64>,
    act1: Array2<f64>,
    pre2: Array2<f64>,
    act2: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct DiscForward {
    /// Probability that each row came from the internal domain.
    pub probs: Vec<f64>,
    cache: DiscCache,
}

/// Trunk, projections and heads: everything the Adam side optimizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub trunk: Vec<Dense>,
    pub projections: Vec<Dense>,
    pub heads: Vec<Dense>,
}

/// Everything the RMSprop side optimizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discriminators {
    pub per_category: BTreeMap<CategoryId, Discriminator>,
    pub holistic: Option<Discriminator>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: Architecture,
    pub generator: Generator,
    pub discriminators: Discriminators,
}

/// Gradient of a scalar loss, shaped like [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub generator: Generator,
    pub discriminators: Discriminators,
}

/// Flat view over the tensors of a parameter block, in a fixed order.
pub trait ParamBlock {
    fn tensors(&self) -> Vec<(String, &[f64])>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn len(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn dense_tensors<'a>(prefix: &str, layers: &'a [Dense], out: &mut Vec<(String, &'a [f64])>) {
    for (i, l) in layers.iter().enumerate() {
        let [w, b] = l.tensors();
        out.push((format!("{prefix}.{i}.weight"), w));
        out.push((format!("{prefix}.{i}.bias"), b));
    }
}

impl ParamBlock for Generator {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        dense_tensors("trunk", &self.trunk, &mut out);
        dense_tensors("projection", &self.projections, &mut out);
        dense_tensors("head", &self.heads, &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.trunk
            .iter_mut()
            .chain(self.projections.iter_mut())
            .chain(self.heads.iter_mut())
            .flat_map(|l| l.tensors_mut())
            .collect()
    }
}

impl ParamBlock for Discriminators {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (c, d) in &self.per_category {
            dense_tensors(&format!("disc[{c}]"), &d.layers, &mut out);
        }
        if let Some(d) = &self.holistic {
            dense_tensors("disc[holistic]", &d.layers, &mut out);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.per_category
            .values_mut()
            .chain(self.holistic.as_mut())
            .flat_map(|d| d.layers.iter_mut())
            .flat_map(|l| l.tensors_mut())
            .collect()
    }
}

impl ParamBlock for ModelParams {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut t = self.generator.tensors();
        t.extend(self.discriminators.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.generator.tensors_mut();
        t.extend(self.discriminators.tensors_mut());
        t
    }
}

impl ParamBlock for Gradients {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut t = self.generator.tensors();
        t.extend(self.discriminators.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.generator.tensors_mut();
        t.extend(self.discriminators.tensors_mut());
        t
    }
}

impl ModelParams {
    fn build(arch: &Architecture, mut make: impl FnMut(usize, usize) -> Dense) -> Self {
        let mut trunk = Vec::new();
        let mut width = arch.input_dim;
        for &w in &arch.trunk_widths {
            trunk.push(make(width, w));
            width = w;
        }
        let n = arch.feature_dim();
        let np = arch.projection_dim;
        let projections = (0..arch.categories).map(|_| make(n, np)).collect();
        let heads = (0..arch.categories).map(|_| make(np, 1)).collect();
        let per_category = arch
            .common
            .iter()
            .map(|&c| (c, Discriminator::build(np, arch.disc_hidden, &mut make)))
            .collect();
        let holistic = arch
            .holistic
            .then(|| Discriminator::build(n, [np, (np / 2).max(1)], &mut make));
        Self {
            arch: arch.clone(),
            generator: Generator {
                trunk,
                projections,
                heads,
            },
            discriminators: Discriminators {
                per_category,
                holistic,
            },
        }
    }

    pub fn zeros(arch: &Architecture) -> Self {
        Self::build(arch, Dense::zeros)
    }

    pub fn init(arch: &Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(arch, |i, o| Dense::init(i, o, &mut rng))
    }

    pub fn zero_gradients(&self) -> Gradients {
        let z = Self::zeros(&self.arch);
        Gradients {
            generator: z.generator,
            discriminators: z.discriminators,
        }
    }

    pub fn discriminator(&self, c: CategoryId) -> Result<&Discriminator, NnError> {
        self.discriminators
            .per_category
            .get(&c)
            .ok_or(NnError::NotCommonCategory(c))
    }

    /// Domain probabilities for per-task features `f_c` of a common category.
    pub fn discriminate(&self, features: ArrayView2<f64>, c: CategoryId) -> Result<DiscForward, NnError> {
        let d = self.discriminator(c)?;
        check_width(features.ncols(), self.arch.projection_dim)?;
        Ok(d.forward(features))
    }

    /// Domain probabilities from the holistic discriminator on the trunk feature.
    pub fn discriminate_holistic(&self, trunk: ArrayView2<f64>) -> Result<DiscForward, NnError> {
        let d = self
            .discriminators
            .holistic
            .as_ref()
            .ok_or(NnError::NoHolisticDiscriminator)?;
        check_width(trunk.ncols(), self.arch.feature_dim())?;
        Ok(d.forward(trunk))
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Forward, NnError> {
        if x.nrows() == 0 {
            return Err(NnError::EmptyBatch);
        }
        check_width(x.ncols(), self.arch.input_dim)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFiniteActivation { layer: 0 });
        }
        let g = &self.generator;
        let mut inputs = vec![x.to_owned()];
        let mut pre = Vec::with_capacity(g.trunk.len());
        for (i, layer) in g.trunk.iter().enumerate() {
            let z = layer.forward(inputs.last().expect("nonempty"));
            let a = leaky_relu(&z);
            if a.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFiniteActivation { layer: i + 1 });
            }
            pre.push(z);
            inputs.push(a);
        }
        let trunk = inputs.pop().expect("nonempty");
        let batch = x.nrows();
        let categories = self.arch.categories;
        let mut features = Vec::with_capacity(categories);
        let mut probs = Array2::zeros((batch, categories));
        for (c, (proj, head)) in g.projections.iter().zip(&g.heads).enumerate() {
            let f = proj.forward(&trunk);
            let logit = head.forward(&f);
            for i in 0..batch {
                let p = logistic(logit[[i, 0]]);
                if !logit[[i, 0]].is_finite() {
                    return Err(NnError::NonFiniteActivation {
                        layer: g.trunk.len() + 1,
                    });
                }
                probs[[i, c]] = p;
            }
            features.push(f);
        }
        Ok(Forward {
            features,
            probs,
            trunk,
            cache: ForwardCache {
                trunk_inputs: inputs,
                trunk_pre: pre,
            },
        })
    }

    /// Reverse pass through heads, projections and trunk. Gradients of the
    /// discriminators are left at zero; use [`Discriminator::backward`] for them.
    pub fn backward(&self, fwd: &Forward, seeds: &Seeds) -> Result<Gradients, NnError> {
        let batch = fwd.probs.nrows();
        let categories = self.arch.categories;
        if fwd.features.len() != categories || fwd.cache.trunk_pre.len() != self.generator.trunk.len() {
            return Err(NnError::CacheMismatch(
                "forward cache does not match this architecture".into(),
            ));
        }
        if let Some(dp) = &seeds.probs {
            if dp.dim() != (batch, categories) {
                return Err(NnError::CacheMismatch(format!(
                    "probability seed {:?} vs batch {:?}",
                    dp.dim(),
                    (batch, categories)
                )));
            }
        }
        for (c, df) in &seeds.features {
            if *c >= categories || df.dim() != (batch, self.arch.projection_dim) {
                return Err(NnError::CacheMismatch(format!(
                    "feature seed for category {c} has shape {:?}",
                    df.dim()
                )));
            }
        }
        if let Some(dh) = &seeds.trunk {
            if dh.dim() != fwd.trunk.dim() {
                return Err(NnError::CacheMismatch("trunk seed shape".into()));
            }
        }

        let g = &self.generator;
        let mut grads = self.zero_gradients();
        let mut d_trunk = match &seeds.trunk {
            Some(dh) => dh.clone(),
            None => Array2::zeros(fwd.trunk.dim()),
        };
        for c in 0..categories {
            let f = &fwd.features[c];
            let mut d_f = match seeds.features.get(&c) {
                Some(df) => df.clone(),
                None => Array2::zeros(f.dim()),
            };
            if let Some(dp) = &seeds.probs {
                let d_logit = Array2::from_shape_fn((batch, 1), |(i, _)| {
                    let p = fwd.probs[[i, c]];
                    dp[[i, c]] * p * (1.0 - p)
                });
                d_f += &g.heads[c].backward(f, &d_logit, &mut grads.generator.heads[c]);
            }
            d_trunk += &g.projections[c].backward(&fwd.trunk, &d_f, &mut grads.generator.projections[c]);
        }
        let mut d_out = d_trunk;
        for (l, layer) in g.trunk.iter().enumerate().rev() {
            let d_pre = leaky_relu_backward(&fwd.cache.trunk_pre[l], &d_out);
            d_out = layer.backward(&fwd.cache.trunk_inputs[l], &d_pre, &mut grads.generator.trunk[l]);
        }
        Ok(grads)
    }
}

fn check_width(found: usize, expected: usize) -> Result<(), NnError> {
    if found == expected {
        Ok(())
    } else {
        Err(NnError::ShapeMismatch(format!(
            "input width {found}, expected {expected}"
        )))
    }
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each trunk layer.
    trunk_inputs: Vec<Array2<f64>>,
    trunk_pre: Vec<Array2<f64>>,
}

/// Result of [`ModelParams::forward`].
#[derive(Debug, Clone)]
pub struct Forward {
    /// Per-task features `f_c`, one `B × N'` block per category.
    pub features: Vec<Array2<f64>>,
    /// `B × C` probabilities.
    pub probs: Array2<f64>,
    /// `B × N` trunk feature.
    pub trunk: Array2<f64>,
    pub cache: ForwardCache,
}

impl Forward {
    /// Features as a `B × C × N'` tensor.
    pub fn feature_tensor(&self) -> Array3<f64> {
        let views: Vec<_> = self.features.iter().map(|f| f.view()).collect();
        ndarray::stack(Axis(1), &views).expect("per-category features share a shape")
    }
}

/// Upstream gradients fed into [`ModelParams::backward`].
#[derive(Debug, Clone, Default)]
pub struct Seeds {
    /// `dL/dp`, `B × C`.
    pub probs: Option<Array2<f64>>,
    /// `dL/df_c` per category.
    pub features: BTreeMap<CategoryId, Array2<f64>>,
    /// `dL/dh` on the trunk feature.
    pub trunk: Option<Array2<f64>>,
}

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b.1).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= k);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny_arch() -> Architecture {
        Architecture {
            input_dim: 2,
            trunk_widths: vec![3],
            projection_dim: 8,
            categories: 3,
            common: vec![0, 1],
            disc_hidden: [8, 4],
            holistic: false,
        }
    }

    #[test]
    fn zero_model_predicts_one_half() {
        let params = ModelParams::zeros(&tiny_arch());
        let x = array![[1.0, -2.0], [0.5, 3.0], [0.0, 0.0], [7.0, 1.0]];
        let fwd = params.forward(x.view()).unwrap();
        assert!(fwd.probs.iter().all(|&p| p == 0.5));
        assert_eq!(fwd.feature_tensor().dim(), (4, 3, 8));
        assert_eq!(fwd.probs.dim(), (4, 3));
        let d = params.discriminate(fwd.features[0].view(), 0).unwrap();
        assert!(d.probs.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn non_common_category_has_no_discriminator() {
        let params = ModelParams::init(&tiny_arch(), 1);
        let f = Array2::zeros((2, 8));
        assert!(matches!(
            params.discriminate(f.view(), 2),
            Err(NnError::NotCommonCategory(2))
        ));
    }

    #[test]
    fn hand_set_linear_trunk_matches_scalar_evaluation() {
        // trunk: one unit h = lrelu(0.5 x0 - 0.25 x1 + 0.1); f = 2h - 0.3; p = logistic(1.5 f + 0.2)
        let arch = Architecture {
            input_dim: 2,
            trunk_widths: vec![1],
            projection_dim: 1,
            categories: 1,
            common: vec![0],
            disc_hidden: [1, 1],
            holistic: false,
        };
        let mut params = ModelParams::zeros(&arch);
        params.generator.trunk[0].weight = array![[0.5, -0.25]];
        params.generator.trunk[0].bias = array![0.1];
        params.generator.projections[0].weight = array![[2.0]];
        params.generator.projections[0].bias = array![-0.3];
        params.generator.heads[0].weight = array![[1.5]];
        params.generator.heads[0].bias = array![0.2];
        let x = array![[0.8, 0.4], [-1.0, 2.0]];
        let fwd = params.forward(x.view()).unwrap();
        for (i, row) in x.rows().into_iter().enumerate() {
            let pre = 0.5 * row[0] - 0.25 * row[1] + 0.1;
            let h = if pre > 0.0 { pre } else { 0.2 * pre };
            let f = 2.0 * h - 0.3;
            let p = 1.0 / (1.0 + (-(1.5 * f + 0.2)).exp());
            assert!((fwd.probs[[i, 0]] - p).abs() < 1e-12);
            assert!((fwd.features[0][[i, 0]] - f).abs() < 1e-12);
        }

        // discriminator: 1 -> 1 -> 1 -> 1
        let d = params.discriminators.per_category.get_mut(&0).unwrap();
        d.layers[0].weight = array![[-1.2]];
        d.layers[0].bias = array![0.3];
        d.layers[1].weight = array![[0.7]];
        d.layers[1].bias = array![-0.1];
        d.layers[2].weight = array![[2.5]];
        d.layers[2].bias = array![0.05];
        let feats = array![[0.9], [-0.4]];
        let out = params.discriminate(feats.view(), 0).unwrap();
        for i in 0..2 {
            let lr = |v: f64| if v > 0.0 { v } else { 0.2 * v };
            let a1 = lr(-1.2 * feats[[i, 0]] + 0.3);
            let a2 = lr(0.7 * a1 - 0.1);
            let p = 1.0 / (1.0 + (-(2.5 * a2 + 0.05)).exp());
            assert!((out.probs[i] - p).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_seed_gives_zero_gradient() {
        let params = ModelParams::init(&tiny_arch(), 3);
        let x = array![[1.0, -2.0], [0.5, 3.0]];
        let fwd = params.forward(x.view()).unwrap();
        let seeds = Seeds {
            probs: Some(Array2::zeros((2, 3))),
            ..Default::default()
        };
        let g = params.backward(&fwd, &seeds).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn duplicated_sample_doubles_its_gradient() {
        let params = ModelParams::init(&tiny_arch(), 4);
        let one = array![[0.3, -1.1]];
        let two = array![[0.3, -1.1], [0.3, -1.1]];
        let seed = |b: usize| Seeds {
            probs: Some(Array2::from_elem((b, 3), 0.7)),
            ..Default::default()
        };
        let g1 = params
            .backward(&params.forward(one.view()).unwrap(), &seed(1))
            .unwrap();
        let g2 = params
            .backward(&params.forward(two.view()).unwrap(), &seed(2))
            .unwrap();
        for ((_, a), (_, b)) in g1.tensors().iter().zip(g2.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(2.0 * x, *y);
            }
        }
    }

    #[test]
    fn mismatched_seed_is_rejected() {
        let params = ModelParams::init(&tiny_arch(), 5);
        let fwd = params.forward(array![[1.0, 2.0]].view()).unwrap();
        let seeds = Seeds {
            probs: Some(Array2::zeros((3, 3))),
            ..Default::default()
        };
        assert!(matches!(
            params.backward(&fwd, &seeds),
            Err(NnError::CacheMismatch(_))
        ));
    }

    #[test]
    fn forward_rejects_empty_and_non_finite_batches() {
        let params = ModelParams::init(&tiny_arch(), 6);
        assert!(matches!(
            params.forward(Array2::zeros((0, 2)).view()),
            Err(NnError::EmptyBatch)
        ));
        assert!(matches!(
            params.forward(array![[f64::NAN, 0.0]].view()),
            Err(NnError::NonFiniteActivation { layer: 0 })
        ));
    }

    #[test]
    fn param_paths_are_unique_and_ordered() {
        let mut params = ModelParams::init(&tiny_arch(), 7);
        let names: Vec<_> = params.tensors().into_iter().map(|(n, _)| n).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert_eq!(names[0], "trunk.0.weight");
        assert!(names.iter().any(|n| n == "disc[1].2.bias"));
        assert_eq!(params.tensors_mut().len(), names.len());
    }
}
