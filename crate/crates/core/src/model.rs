//! Per-point regression model: linear embedding, a stack of blocks and a
//! linear head.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::branches::{PhiWeights, SelectionPlan, TieBreak};
use crate::config::BsaConfig;
use crate::error::{shape_err, BsaError, Result};
use crate::geom::{build_ball_tree, permute_features, unpermute_features, BallTree, PointCloud, PAD};
use crate::layer::{block_backward_padded, block_forward_padded, BlockWorkspace, ForwardOptions, LayerParams};
use crate::real::Real;

/// Shape of a [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Input width: point coordinates plus any extra per-point features.
    pub in_dim: usize,
    pub depth: usize,
    pub layer: BsaConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.depth == 0 {
            return Err(BsaError::InvalidConfig("in_dim and depth must be >= 1".into()));
        }
        self.layer.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub embed_w: Array2<T>,
    pub embed_b: Array1<T>,
    pub layers: Vec<LayerParams<T>>,
    pub head_w: Array1<T>,
    /// Length one.
    pub head_b: Array1<T>,
}

fn view_d<T, D: ndarray::Dimension>(a: &ndarray::Array<T, D>) -> ArrayViewD<'_, T> {
    a.view().into_dyn()
}

fn view_mut_d<T, D: ndarray::Dimension>(a: &mut ndarray::Array<T, D>) -> ArrayViewMutD<'_, T> {
    a.view_mut().into_dyn()
}

impl<T: Real> ModelParams<T> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.layer.model_dim;
        let s = (1.0 / cfg.in_dim as f64).sqrt();
        let embed_w = Array2::from_shape_simple_fn((cfg.in_dim, c), || {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::c(z * s)
        });
        let layers = (0..cfg.depth)
            .map(|_| LayerParams::init(&cfg.layer, &mut rng))
            .collect();
        let s = (1.0 / c as f64).sqrt();
        let head_w = Array1::from_shape_simple_fn(c, || {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::c(z * s)
        });
        Ok(Self {
            embed_w,
            embed_b: Array1::zeros(c),
            layers,
            head_w,
            head_b: Array1::zeros(1),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            embed_w: Array2::zeros(self.embed_w.raw_dim()),
            embed_b: Array1::zeros(self.embed_b.len()),
            layers: self.layers.iter().map(LayerParams::zeros_like).collect(),
            head_w: Array1::zeros(self.head_w.len()),
            head_b: Array1::zeros(1),
        }
    }

    /// Every tensor with a stable dotted name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = vec![
            ("embed.weight".to_string(), view_d(&self.embed_w)),
            ("embed.bias".to_string(), view_d(&self.embed_b)),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{i}.{s}");
            out.push((p("norm_attn"), view_d(&l.norm_attn)));
            out.push((p("wq"), view_d(&l.proj.wq)));
            out.push((p("wk"), view_d(&l.proj.wk)));
            out.push((p("wv"), view_d(&l.proj.wv)));
            if let Some(wo) = &l.proj.wo {
                out.push((p("wo"), view_d(wo)));
            }
            for (tag, phi) in [("phi_q", &l.phi_q), ("phi_k", &l.phi_k), ("phi_v", &l.phi_v)] {
                if let PhiWeights::Mlp { w1, w2 } = phi {
                    out.push((p(&format!("{tag}.w1")), view_d(w1)));
                    out.push((p(&format!("{tag}.w2")), view_d(w2)));
                }
            }
            out.push((p("gates"), view_d(&l.gates.logits)));
            out.push((p("norm_ffn"), view_d(&l.norm_ffn)));
            out.push((p("ffn.w1"), view_d(&l.ffn.w1)));
            out.push((p("ffn.w2"), view_d(&l.ffn.w2)));
            out.push((p("ffn.w3"), view_d(&l.ffn.w3)));
        }
        out.push(("head.weight".to_string(), view_d(&self.head_w)));
        out.push(("head.bias".to_string(), view_d(&self.head_b)));
        out
    }

    /// Mutable counterpart of [`Self::named_tensors`], same order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = vec![
            ("embed.weight".to_string(), view_mut_d(&mut self.embed_w)),
            ("embed.bias".to_string(), view_mut_d(&mut self.embed_b)),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = |s: &str| format!("layers.{i}.{s}");
            out.push((p("norm_attn"), view_mut_d(&mut l.norm_attn)));
            out.push((p("wq"), view_mut_d(&mut l.proj.wq)));
            out.push((p("wk"), view_mut_d(&mut l.proj.wk)));
            out.push((p("wv"), view_mut_d(&mut l.proj.wv)));
            if let Some(wo) = &mut l.proj.wo {
                out.push((p("wo"), view_mut_d(wo)));
            }
            for (tag, phi) in [
                ("phi_q", &mut l.phi_q),
                ("phi_k", &mut l.phi_k),
                ("phi_v", &mut l.phi_v),
            ] {
                if let PhiWeights::Mlp { w1, w2 } = phi {
                    out.push((p(&format!("{tag}.w1")), view_mut_d(w1)));
                    out.push((p(&format!("{tag}.w2")), view_mut_d(w2)));
                }
            }
            out.push((p("gates"), view_mut_d(&mut l.gates.logits)));
            out.push((p("norm_ffn"), view_mut_d(&mut l.norm_ffn)));
            out.push((p("ffn.w1"), view_mut_d(&mut l.ffn.w1)));
            out.push((p("ffn.w2"), view_mut_d(&mut l.ffn.w2)));
            out.push((p("ffn.w3"), view_mut_d(&mut l.ffn.w3)));
        }
        out.push(("head.weight".to_string(), view_mut_d(&mut self.head_w)));
        out.push(("head.bias".to_string(), view_mut_d(&mut self.head_b)));
        out
    }

    pub fn n_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// All values concatenated in [`Self::named_tensors`] order.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.n_params());
        for (_, t) in self.named_tensors() {
            out.extend(t.iter().copied());
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(shape_err(format!(
                "{} values for {} parameters",
                flat.len(),
                self.n_params()
            )));
        }
        let mut at = 0;
        for (_, mut t) in self.named_tensors_mut() {
            for x in t.iter_mut() {
                *x = flat[at];
                at += 1;
            }
        }
        Ok(())
    }
}

/// Intermediates of one model forward, in tree order.
#[derive(Debug, Clone)]
pub struct ModelWorkspace<T> {
    pub input: Array2<T>,
    pub blocks: Vec<BlockWorkspace<T>>,
    pub hidden: Array2<T>,
}

impl<T: Real> ModelWorkspace<T> {
    /// Selection plans per layer, per head.
    pub fn plans(&self) -> Vec<Vec<SelectionPlan>> {
        self.blocks.iter().map(|b| b.attn.plans()).collect()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ModelOptions<'a> {
    /// Per layer, per head.
    pub frozen_plans: Option<&'a [Vec<SelectionPlan>]>,
    pub tie: TieBreak,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        let c = config.layer.model_dim;
        if params.embed_w.dim() != (config.in_dim, c)
            || params.embed_b.len() != c
            || params.layers.len() != config.depth
            || params.head_w.len() != c
            || params.head_b.len() != 1
        {
            return Err(shape_err("parameters do not match the model config"));
        }
        Ok(Self { config, params })
    }

    pub fn build_tree(&self, points: &PointCloud) -> Result<BallTree> {
        build_ball_tree(points, self.config.layer.ball_size)
    }

    /// Predictions in original point order for an `N x in_dim` input.
    pub fn predict(&self, tree: &BallTree, input: ArrayView2<'_, T>) -> Result<Array1<T>> {
        Ok(self.forward(tree, input, ModelOptions::default())?.0)
    }

    pub fn forward(
        &self,
        tree: &BallTree,
        input: ArrayView2<'_, T>,
        opts: ModelOptions<'_>,
    ) -> Result<(Array1<T>, ModelWorkspace<T>)> {
        if input.ncols() != self.config.in_dim || input.nrows() != tree.n_valid() {
            return Err(shape_err(format!(
                "input is {:?}, expected {}x{}",
                input.dim(),
                tree.n_valid(),
                self.config.in_dim
            )));
        }
        if let Some(f) = opts.frozen_plans {
            if f.len() != self.config.depth {
                return Err(BsaError::InvalidArgument("one plan set per layer required".into()));
            }
        }
        let p = &self.params;
        let xin = permute_features(tree, input, T::zero())?;
        let mut h = xin.dot(&p.embed_w) + &p.embed_b;
        zero_padded(&mut h, tree.valid_mask());
        let mut blocks = Vec::with_capacity(self.config.depth);
        for (i, layer) in p.layers.iter().enumerate() {
            let lopts = ForwardOptions {
                frozen_plans: opts.frozen_plans.map(|f| f[i].as_slice()),
                tie: opts.tie,
            };
            let (next, ws) = block_forward_padded(h.view(), tree, &self.config.layer, layer, lopts)?;
            blocks.push(ws);
            h = next;
        }
        let head_b = p.head_b[0];
        let mut out = Array1::zeros(tree.n_valid());
        for (pos, &src) in tree.permutation().iter().enumerate() {
            if src != PAD {
                out[src] = h.row(pos).dot(&p.head_w) + head_b;
            }
        }
        Ok((
            out,
            ModelWorkspace {
                input: xin,
                blocks,
                hidden: h,
            },
        ))
    }

    /// Returns parameter gradients and the input gradient (original order)
    /// for `grad_pred = dL/dpred`.
    pub fn backward(
        &self,
        tree: &BallTree,
        ws: &ModelWorkspace<T>,
        grad_pred: ArrayView1<'_, T>,
    ) -> Result<(ModelParams<T>, Array2<T>)> {
        if grad_pred.len() != tree.n_valid() || ws.blocks.len() != self.config.depth {
            return Err(BsaError::StaleWorkspace(
                "model workspace does not match gradient".into(),
            ));
        }
        let p = &self.params;
        let mut grads = p.zeros_like();
        let n = tree.n_padded();
        let c = self.config.layer.model_dim;
        let mut dh = Array2::zeros((n, c));
        for (pos, &src) in tree.permutation().iter().enumerate() {
            if src == PAD {
                continue;
            }
            let g = grad_pred[src];
            grads.head_b[0] += g;
            grads.head_w.scaled_add(g, &ws.hidden.row(pos));
            dh.row_mut(pos).scaled_add(g, &p.head_w);
        }
        for (i, layer) in p.layers.iter().enumerate().rev() {
            dh = block_backward_padded(
                &ws.blocks[i],
                tree,
                &self.config.layer,
                layer,
                dh.view(),
                &mut grads.layers[i],
            )?;
        }
        zero_padded(&mut dh, tree.valid_mask());
        grads.embed_w += &ws.input.t().dot(&dh);
        grads.embed_b += &dh.sum_axis(Axis(0));
        let dx_tree = dh.dot(&p.embed_w.t());
        let dx = unpermute_features(tree, dx_tree.view())?;
        Ok((grads, dx))
    }
}

fn zero_padded<T: Real>(m: &mut Array2<T>, valid: &[bool]) {
    for (mut row, &ok) in m.rows_mut().into_iter().zip(valid) {
        if !ok {
            row.fill(T::zero());
        }
    }
}

/// Model input: coordinates followed by optional extra features.
pub fn input_matrix<T: Real>(points: &PointCloud, extra: Option<ArrayView2<'_, f64>>) -> Result<Array2<T>> {
    let coords = points.coords();
    let f = match extra {
        Some(e) if e.nrows() != points.n_points() => {
            return Err(shape_err("extra features must have one row per point"));
        }
        Some(e) => e.ncols(),
        None => 0,
    };
    let mut out = Array2::zeros((points.n_points(), points.dim() + f));
    for i in 0..points.n_points() {
        for j in 0..points.dim() {
            out[[i, j]] = T::c(coords[[i, j]]);
        }
        if let Some(e) = extra {
            for j in 0..f {
                out[[i, points.dim() + j]] = T::c(e[[i, j]]);
            }
        }
    }
    Ok(out)
}

/// Builds the tree and runs `params` on `points` (plus `features`).
pub fn model_forward<T: Real>(
    points: &PointCloud,
    features: Option<ArrayView2<'_, f64>>,
    config: &BsaConfig,
    params: &ModelParams<T>,
    depth: usize,
) -> Result<Array1<T>> {
    let input = input_matrix::<T>(points, features)?;
    let model = Model::from_parts(
        ModelConfig {
            in_dim: input.ncols(),
            depth,
            layer: config.clone(),
        },
        params.clone(),
    )?;
    let tree = model.build_tree(points)?;
    model.predict(&tree, input.view())
}

/// Dimensions of every named tensor, for checkpoint validation.
pub fn tensor_shapes<T: Real>(params: &ModelParams<T>) -> Vec<(String, IxDyn)> {
    params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.raw_dim()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PhiKind;

    fn toy_cfg(depth: usize) -> ModelConfig {
        ModelConfig {
            in_dim: 3,
            depth,
            layer: BsaConfig {
                ball_size: 16,
                block_len: 4,
                top_k: 2,
                group_size: 4,
                heads: 2,
                model_dim: 8,
                head_dim: 4,
                ffn_dim: 16,
                phi: PhiKind::Mlp,
                ..BsaConfig::desk_default()
            },
        }
    }

    fn cloud(n: usize, seed: u64) -> PointCloud {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(Array2::from_shape_simple_fn((n, 3), || rng.random_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn zero_head_gives_zero_predictions() {
        let mut m = Model::<f64>::new(toy_cfg(1), 0).unwrap();
        m.params.head_w.fill(0.0);
        let pts = cloud(40, 1);
        let x = input_matrix::<f64>(&pts, None).unwrap();
        let tree = m.build_tree(&pts).unwrap();
        assert!(m.predict(&tree, x.view()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flatten_round_trips() {
        let m = Model::<f64>::new(toy_cfg(2), 3).unwrap();
        let flat = m.params.flatten();
        assert_eq!(flat.len(), m.params.n_params());
        let mut z = m.params.zeros_like();
        z.assign_flat(&flat).unwrap();
        assert_eq!(z, m.params);
        assert!(z.assign_flat(&flat[1..]).is_err());
        let names: Vec<String> = m.params.named_tensors().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.dedup();
        assert_eq!(names, dedup);
        assert!(names.contains(&"layers.1.phi_q.w1".to_string()));
    }

    #[test]
    fn model_forward_matches_model_predict() {
        let cfg = toy_cfg(2);
        let params = ModelParams::<f64>::init(&cfg, 5).unwrap();
        let pts = cloud(37, 2);
        let a = model_forward(&pts, None, &cfg.layer, &params, 2).unwrap();
        let m = Model::from_parts(cfg, params).unwrap();
        let x = input_matrix::<f64>(&pts, None).unwrap();
        assert_eq!(a, m.predict(&m.build_tree(&pts).unwrap(), x.view()).unwrap());
    }
}
