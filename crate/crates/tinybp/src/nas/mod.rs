//! Differentiable architecture search over convolution substitutions.
//!
//! Every standalone convolution in a seed graph becomes a weighted choice
//! between three branches: the convolution itself, a depthwise-separable
//! block, and (where input and output shapes agree) an identity shortcut.
//! A branch spans the convolution plus its private batch norm and activation
//! so that picking one branch yields exactly the subnetwork a discretized
//! child computes. Branch weights are a softmax over per-position logits
//! trained jointly with the regular weights; a differentiable parameter-count
//! term steers the logits toward cheaper branches.

pub mod sweep;
pub mod train;

pub use sweep::{lambda_grid, pareto_flags, run_sweep, SweepConfig, SweepPoint};
pub use train::{train_supernet, NasTrainConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, LayerSpec, INPUT};
use crate::model::{self, clone_leaf, clone_params, FloatModel, NodeParams, BN_EPS, BN_MOMENTUM};
use crate::tensor::{ops, Tensor, Value};

/// One selectable branch at a choice position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AltKind {
    Conv,
    Dw,
    Id,
}

/// Parameters of the depthwise-separable branch. The branch gets its own
/// batch norm when the position has one, because batch statistics of the two
/// convolution branches differ.
#[derive(Debug, Clone)]
pub struct DwBranch {
    pub dw_w: Value<f32>,
    pub dw_b: Value<f32>,
    pub pw_w: Value<f32>,
    pub pw_b: Value<f32>,
    pub gamma: Option<Value<f32>>,
    pub beta: Option<Value<f32>>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

/// A convolution node eligible for substitution, together with the batch
/// norm and relu it exclusively feeds (its companions). The mixture output
/// replaces the whole chain.
#[derive(Debug, Clone)]
pub struct ChoicePosition {
    pub conv_node: usize,
    pub bn_node: Option<usize>,
    pub relu_node: Option<usize>,
    /// Available branches, always starting `[Conv, Dw]`, plus `Id` when the
    /// convolution preserves its input shape.
    pub alts: Vec<AltKind>,
    /// Learnable parameters of each branch, companions included.
    pub costs: Vec<f64>,
    /// Branch logits, one per alternative.
    pub theta: Value<f32>,
    pub dw: DwBranch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Normal,
    /// Convolution node of choice position `p`; evaluates the mixture.
    Choice(usize),
    /// Companion of position `p`; aliases the mixture output.
    Merged(usize),
}

/// A seed model with every eligible convolution expanded into a weighted
/// mixture of branches.
#[derive(Debug)]
pub struct SuperNet {
    pub model: FloatModel,
    pub positions: Vec<ChoicePosition>,
    role: Vec<Role>,
    /// Learnable parameters outside all choice positions.
    fixed_cost: f64,
}


impl SuperNet {
    /// Expand a seed model. Every `Conv1d` node becomes a choice position;
    /// the fresh depthwise branches draw their init from `seed`.
    pub fn from_seed(model: FloatModel, seed: u64) -> Result<SuperNet> {
        let shapes = model.graph.validate()?;
        let graph = &model.graph;
        let n = graph.nodes.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut positions = Vec::new();
        let mut role = vec![Role::Normal; n];

        for i in 0..n {
            let LayerSpec::Conv1d {
                c_in,
                c_out,
                k,
                stride,
                padding,
            } = graph.nodes[i].spec
            else {
                continue;
            };

            // Companions: a batch norm that is the convolution's only
            // consumer, then a relu that is the batch norm's only consumer.
            let mut tail = i;
            let mut bn_node = None;
            if let [j] = graph.consumers(tail)[..] {
                if matches!(graph.nodes[j].spec, LayerSpec::BatchNorm { .. }) {
                    bn_node = Some(j);
                    tail = j;
                }
            }
            let mut relu_node = None;
            if bn_node.is_some() {
                if let [j] = graph.consumers(tail)[..] {
                    if graph.nodes[j].spec == LayerSpec::Relu {
                        relu_node = Some(j);
                    }
                }
            }

            let in_shape = match graph.nodes[i].inputs[0] {
                INPUT => graph.input_shape(),
                src => shapes[src],
            };
            let has_id = in_shape == shapes[i];

            let bn_cost = bn_node.map_or(0, |j| graph.nodes[j].spec.param_count());
            let conv_cost = graph.nodes[i].spec.param_count() + bn_cost;
            let dw_spec = LayerSpec::DwBlock {
                c_in,
                c_out,
                k,
                stride,
                padding,
            };
            let dw_cost = dw_spec.param_count() + bn_cost;

            let mut alts = vec![AltKind::Conv, AltKind::Dw];
            let mut costs = vec![conv_cost as f64, dw_cost as f64];
            if has_id {
                alts.push(AltKind::Id);
                costs.push(0.0);
            }

            let dw = DwBranch {
                dw_w: model::kaiming(&mut rng, &[c_in, 1, k], k)?,
                dw_b: model::zeros(&[c_in])?,
                pw_w: model::kaiming(&mut rng, &[c_out, c_in, 1], c_in)?,
                pw_b: model::zeros(&[c_out])?,
                gamma: bn_node
                    .map(|_| Tensor::leaf(&[c_out], vec![1.0; c_out], true))
                    .transpose()?,
                beta: bn_node.map(|_| model::zeros(&[c_out])).transpose()?,
                running_mean: if bn_node.is_some() {
                    vec![0.0; c_out]
                } else {
                    Vec::new()
                },
                running_var: if bn_node.is_some() {
                    vec![1.0; c_out]
                } else {
                    Vec::new()
                },
            };

            role[i] = Role::Choice(positions.len());
            if let Some(j) = bn_node {
                role[j] = Role::Merged(positions.len());
            }
            if let Some(j) = relu_node {
                role[j] = Role::Merged(positions.len());
            }
            positions.push(ChoicePosition {
                conv_node: i,
                bn_node,
                relu_node,
                alts,
                costs,
                theta: model::zeros(&[if has_id { 3 } else { 2 }])?,
                dw,
            });
        }

        let swept: f64 = positions.iter().map(|p| p.costs[0]).sum();
        let fixed_cost = graph.param_count() as f64 - swept;
        Ok(SuperNet {
            model,
            positions,
            role,
            fixed_cost,
        })
    }

    /// Mixture over one position's branches.
    fn forward_choice(
        &mut self,
        p: usize,
        x: &Value<f32>,
        training: bool,
    ) -> Result<Value<f32>> {
        let pos = self.positions[p].clone();
        let LayerSpec::Conv1d {
            stride, padding, ..
        } = self.model.graph.nodes[pos.conv_node].spec
        else {
            return Err(Error::Invalid(format!(
                "choice position {p} does not sit on a convolution"
            )));
        };

        let mut conv = self
            .model
            .eval_node(pos.conv_node, std::slice::from_ref(x), training)?;
        if let Some(j) = pos.bn_node {
            conv = self.model.eval_node(j, &[conv], training)?;
        }
        if pos.relu_node.is_some() {
            conv = ops::relu(&conv)?;
        }

        let mid = ops::depthwise_conv1d(x, &pos.dw.dw_w, Some(&pos.dw.dw_b), stride, padding)?;
        let mut dwv = ops::conv1d(&mid, &pos.dw.pw_w, Some(&pos.dw.pw_b), 1, 0)?;
        if pos.bn_node.is_some() {
            let gamma = pos.dw.gamma.as_ref().expect("bn branch has gamma");
            let beta = pos.dw.beta.as_ref().expect("bn branch has beta");
            dwv = if training {
                let (y, mean, var) = ops::batchnorm_train(&dwv, gamma, beta, BN_EPS)?;
                let dw = &mut self.positions[p].dw;
                for (r, m) in dw.running_mean.iter_mut().zip(&mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                }
                for (r, v) in dw.running_var.iter_mut().zip(&var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                }
                y
            } else {
                ops::batchnorm_eval(&dwv, gamma, beta, &pos.dw.running_mean, &pos.dw.running_var, BN_EPS)?
            };
        }
        if pos.relu_node.is_some() {
            dwv = ops::relu(&dwv)?;
        }

        let mut items = vec![conv, dwv];
        if pos.alts.contains(&AltKind::Id) {
            items.push(x.clone());
        }
        let s = ops::softmax(&pos.theta)?;
        ops::weighted_sum(&s, &items)
    }

    /// Forward pass over a `[n, c, l]` batch with every choice position
    /// evaluating all of its branches.
    pub fn forward(&mut self, x: &Value<f32>, training: bool) -> Result<Value<f32>> {
        let n = self.model.graph.nodes.len();
        let mut outs: Vec<Value<f32>> = Vec::with_capacity(n);
        for i in 0..n {
            let y = match self.role[i] {
                Role::Merged(p) => outs[self.positions[p].conv_node].clone(),
                Role::Choice(p) => {
                    let src = self.model.graph.nodes[i].inputs[0];
                    let xin = if src == INPUT {
                        x.clone()
                    } else {
                        outs[src].clone()
                    };
                    self.forward_choice(p, &xin, training)?
                }
                Role::Normal => {
                    let ins: Vec<Value<f32>> = self.model.graph.nodes[i]
                        .inputs
                        .iter()
                        .map(|&src| {
                            if src == INPUT {
                                x.clone()
                            } else {
                                outs[src].clone()
                            }
                        })
                        .collect();
                    self.model.eval_node(i, &ins, training)?
                }
            };
            outs.push(y);
        }
        Ok(outs.pop().expect("graphs are non-empty"))
    }

    /// Differentiable expected parameter count: the softmax-weighted branch
    /// costs summed over positions, plus everything not under search.
    pub fn expected_cost(&self) -> Result<Value<f32>> {
        let mut terms = Vec::with_capacity(self.positions.len());
        for pos in &self.positions {
            let s = ops::softmax(&pos.theta)?;
            let costs: Vec<f32> = pos.costs.iter().map(|&c| c as f32).collect();
            terms.push(ops::dot_const(&s, &costs)?);
        }
        ops::add_scalars(&terms, self.fixed_cost as f32)
    }

    /// Regular weights: every seed parameter plus the depthwise branches.
    /// Branch logits are excluded.
    pub fn weight_params(&self) -> Vec<Value<f32>> {
        let mut out = self.model.parameters();
        for pos in &self.positions {
            out.extend([
                pos.dw.dw_w.clone(),
                pos.dw.dw_b.clone(),
                pos.dw.pw_w.clone(),
                pos.dw.pw_b.clone(),
            ]);
            if let Some(g) = &pos.dw.gamma {
                out.push(g.clone());
            }
            if let Some(b) = &pos.dw.beta {
                out.push(b.clone());
            }
        }
        out
    }

    /// Branch logits, one tensor per choice position.
    pub fn theta_params(&self) -> Vec<Value<f32>> {
        self.positions.iter().map(|p| p.theta.clone()).collect()
    }

    /// Overwrite one position's logits; test and inspection hook.
    pub fn set_theta(&mut self, p: usize, logits: &[f32]) -> Result<()> {
        let pos = self
            .positions
            .get(p)
            .ok_or_else(|| Error::Invalid(format!("no choice position {p}")))?;
        if logits.len() != pos.alts.len() {
            return Err(Error::Invalid(format!(
                "position {p} has {} branches, got {} logits",
                pos.alts.len(),
                logits.len()
            )));
        }
        pos.theta.set_data(logits);
        Ok(())
    }

    /// Winning branch per position: highest logit, ties broken toward the
    /// cheaper branch.
    pub fn choices(&self) -> Vec<AltKind> {
        self.positions
            .iter()
            .map(|pos| {
                let th = pos.theta.data();
                let mut best = 0;
                for a in 1..th.len() {
                    if th[a] > th[best] || (th[a] == th[best] && pos.costs[a] < pos.costs[best])
                    {
                        best = a;
                    }
                }
                pos.alts[best]
            })
            .collect()
    }

    /// Materialize the winning branches as a standalone model. Parameters
    /// are copied, so the child trains independently of the supernet.
    pub fn discretize(&self) -> Result<FloatModel> {
        let chosen = self.choices();
        let graph = &self.model.graph;
        let n = graph.nodes.len();
        let mut out = Graph::new(graph.input_channels, graph.input_len);
        let mut params: Vec<NodeParams> = Vec::new();
        // resolve[i]: node in the child graph holding old node i's value.
        let mut resolve = vec![INPUT; n];
        for i in 0..n {
            let remap = |src: usize| if src == INPUT { INPUT } else { resolve[src] };
            let src0 = remap(graph.nodes[i].inputs[0]);
            match self.role[i] {
                Role::Normal => {
                    let inputs = graph.nodes[i].inputs.iter().map(|&s| remap(s)).collect();
                    resolve[i] = out.push(graph.nodes[i].spec, inputs);
                    params.push(clone_params(&self.model.params[i])?);
                }
                Role::Choice(p) => match chosen[p] {
                    AltKind::Conv => {
                        resolve[i] = out.push(graph.nodes[i].spec, vec![src0]);
                        params.push(clone_params(&self.model.params[i])?);
                    }
                    AltKind::Dw => {
                        let LayerSpec::Conv1d {
                            c_in,
                            c_out,
                            k,
                            stride,
                            padding,
                        } = graph.nodes[i].spec
                        else {
                            unreachable!("choice positions sit on convolutions")
                        };
                        let spec = LayerSpec::DwBlock {
                            c_in,
                            c_out,
                            k,
                            stride,
                            padding,
                        };
                        resolve[i] = out.push(spec, vec![src0]);
                        let dw = &self.positions[p].dw;
                        params.push(NodeParams::Dw {
                            dw_w: clone_leaf(&dw.dw_w)?,
                            dw_b: clone_leaf(&dw.dw_b)?,
                            pw_w: clone_leaf(&dw.pw_w)?,
                            pw_b: clone_leaf(&dw.pw_b)?,
                        });
                    }
                    AltKind::Id => resolve[i] = src0,
                },
                Role::Merged(p) => match chosen[p] {
                    AltKind::Id => resolve[i] = src0,
                    alt => {
                        resolve[i] = out.push(graph.nodes[i].spec, vec![src0]);
                        let take_dw_bn =
                            alt == AltKind::Dw && Some(i) == self.positions[p].bn_node;
                        if take_dw_bn {
                            let dw = &self.positions[p].dw;
                            params.push(NodeParams::Bn {
                                gamma: clone_leaf(dw.gamma.as_ref().expect("bn branch"))?,
                                beta: clone_leaf(dw.beta.as_ref().expect("bn branch"))?,
                                running_mean: dw.running_mean.clone(),
                                running_var: dw.running_var.clone(),
                            });
                        } else {
                            params.push(clone_params(&self.model.params[i])?);
                        }
                    }
                },
            }
        }
        // The output must be the last node; an all-identity tail needs an
        // explicit passthrough.
        if out.nodes.is_empty() || resolve[n - 1] != out.nodes.len() - 1 {
            out.push(LayerSpec::Identity, vec![resolve[n - 1]]);
            params.push(NodeParams::None);
        }
        out.validate()?;
        Ok(FloatModel { graph: out, params })
    }
}

/// Search objective: task loss plus `lambda` times the expected parameter
/// count. `lambda` must be non-negative and finite.
pub fn nas_loss(task: &Value<f32>, cost: &Value<f32>, lambda: f64) -> Result<Value<f32>> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Invalid(format!(
            "cost weight must be finite and non-negative, got {lambda}"
        )));
    }
    if task.len() != 1 || cost.len() != 1 {
        return Err(Error::Shape(format!(
            "objective terms must be scalars, got {:?} and {:?}",
            task.shape(),
            cost.shape()
        )));
    }
    ops::add_scaled(task, 1.0, cost, lambda as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{self, SynthConfig};
    use crate::data::{build_windows, split};
    use crate::graph::testgen::{random_graph, GenConfig};
    use crate::model::{to_train_data, TargetKind};
    use crate::nas::train::{train_supernet, NasTrainConfig};
    use rand::Rng;

    fn conv(c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize) -> LayerSpec {
        LayerSpec::Conv1d {
            c_in,
            c_out,
            k,
            stride,
            padding,
        }
    }

    /// Two expandable convolutions: the first preserves shape (identity
    /// legal), the second widens channels (identity illegal).
    fn tiny_net() -> Graph {
        let mut g = Graph::new(4, 16);
        let c1 = g.push(conv(4, 4, 3, 1, 1), vec![INPUT]);
        let b1 = g.push(LayerSpec::BatchNorm { c: 4 }, vec![c1]);
        let r1 = g.push(LayerSpec::Relu, vec![b1]);
        let c2 = g.push(conv(4, 8, 3, 1, 1), vec![r1]);
        let b2 = g.push(LayerSpec::BatchNorm { c: 8 }, vec![c2]);
        let r2 = g.push(LayerSpec::Relu, vec![b2]);
        let gap = g.push(LayerSpec::GlobalAvgPool, vec![r2]);
        g.push(
            LayerSpec::Linear {
                in_features: 8,
                out_features: 1,
            },
            vec![gap],
        );
        g
    }

    #[test]
    fn lone_square_conv_expands_to_three_branches() {
        let mut g = Graph::new(8, 16);
        g.push(conv(8, 8, 1, 1, 0), vec![INPUT]);
        let sn = SuperNet::from_seed(FloatModel::init(g, 0).unwrap(), 1).unwrap();
        assert_eq!(sn.positions.len(), 1);
        assert_eq!(sn.positions[0].alts, [AltKind::Conv, AltKind::Dw, AltKind::Id]);
        assert_eq!(sn.positions[0].costs, [72.0, 88.0, 0.0]);
        assert_eq!(sn.fixed_cost, 0.0);
        // Uniform logits average the branch costs: (72 + 88 + 0) / 3.
        let cost = sn.expected_cost().unwrap().item() as f64;
        assert!((cost - 160.0 / 3.0).abs() < 1e-3, "cost {cost}");
    }

    #[test]
    fn companions_fold_into_branch_costs() {
        let sn = SuperNet::from_seed(FloatModel::init(tiny_net(), 0).unwrap(), 1).unwrap();
        assert_eq!(sn.positions.len(), 2);
        let p0 = &sn.positions[0];
        assert_eq!(p0.bn_node, Some(1));
        assert_eq!(p0.relu_node, Some(2));
        assert_eq!(p0.alts, [AltKind::Conv, AltKind::Dw, AltKind::Id]);
        assert_eq!(p0.costs, [60.0, 44.0, 0.0]);
        let p1 = &sn.positions[1];
        assert_eq!(p1.alts, [AltKind::Conv, AltKind::Dw]);
        assert_eq!(p1.costs, [120.0, 72.0]);
        // Only the linear head sits outside the two blocks.
        assert_eq!(sn.fixed_cost, 9.0);
        let cost = sn.expected_cost().unwrap().item() as f64;
        let want = 9.0 + (60.0 + 44.0) / 3.0 + (120.0 + 72.0) / 2.0;
        assert!((cost - want).abs() < 1e-3, "cost {cost} want {want}");
    }

    #[test]
    fn one_hot_logits_make_cost_and_child_params_agree_exactly() {
        let model = FloatModel::init(tiny_net(), 3).unwrap();
        let mut sn = SuperNet::from_seed(model, 4).unwrap();
        for a0 in 0..3 {
            for a1 in 0..2 {
                let mut l0 = [-200.0f32; 3];
                l0[a0] = 200.0;
                let mut l1 = [-200.0f32; 2];
                l1[a1] = 200.0;
                sn.set_theta(0, &l0).unwrap();
                sn.set_theta(1, &l1).unwrap();
                let expect = sn.expected_cost().unwrap().item() as f64;
                let child = sn.discretize().unwrap();
                assert_eq!(
                    child.param_count() as f64,
                    expect,
                    "branches ({a0}, {a1})"
                );
            }
        }
    }

    #[test]
    fn one_hot_supernet_and_child_are_bit_identical() {
        let model = FloatModel::init(tiny_net(), 3).unwrap();
        let mut sn = SuperNet::from_seed(model, 4).unwrap();
        let x = Tensor::constant(
            &[2, 4, 16],
            (0..2 * 4 * 16).map(|i| ((i * 37 % 97) as f32) / 48.5 - 1.0).collect(),
        )
        .unwrap();
        for a0 in 0..3 {
            for a1 in 0..2 {
                let mut l0 = [-200.0f32; 3];
                l0[a0] = 200.0;
                let mut l1 = [-200.0f32; 2];
                l1[a1] = 200.0;
                sn.set_theta(0, &l0).unwrap();
                sn.set_theta(1, &l1).unwrap();
                let mixture = sn.forward(&x, false).unwrap();
                let mut child = sn.discretize().unwrap();
                let direct = child.forward(&x, false).unwrap();
                assert_eq!(*mixture.data(), *direct.data(), "branches ({a0}, {a1})");
            }
        }
    }

    #[test]
    fn identity_choice_splices_out_the_whole_chain() {
        let model = FloatModel::init(tiny_net(), 3).unwrap();
        let mut sn = SuperNet::from_seed(model, 4).unwrap();
        sn.set_theta(0, &[-200.0, -200.0, 200.0]).unwrap();
        sn.set_theta(1, &[200.0, -200.0]).unwrap();
        let child = sn.discretize().unwrap();
        // conv+bn+relu gone, second block plus head intact.
        assert_eq!(child.graph.nodes.len(), 5);
        assert!(matches!(
            child.graph.nodes[0].spec,
            LayerSpec::Conv1d { c_in: 4, c_out: 8, .. }
        ));
        assert_eq!(child.graph.nodes[0].inputs, [INPUT]);
    }

    #[test]
    fn equal_logits_break_ties_toward_the_cheaper_branch() {
        let sn = SuperNet::from_seed(FloatModel::init(tiny_net(), 0).unwrap(), 1).unwrap();
        // Position 0 has a free identity branch; position 1's depthwise
        // block undercuts the convolution.
        assert_eq!(sn.choices(), [AltKind::Id, AltKind::Dw]);

        // A 1-in 2-out k=1 convolution is cheaper than its depthwise
        // counterpart, so the tie must go the other way.
        let mut g = Graph::new(1, 8);
        g.push(conv(1, 2, 1, 1, 0), vec![INPUT]);
        let sn = SuperNet::from_seed(FloatModel::init(g, 0).unwrap(), 1).unwrap();
        assert_eq!(sn.positions[0].costs, [4.0, 6.0]);
        assert_eq!(sn.choices(), [AltKind::Conv]);
    }

    #[test]
    fn random_one_hot_children_stay_valid_and_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for seed in 0..25u64 {
            let mut grng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = random_graph(&mut grng, &GenConfig::default());
            let model = FloatModel::init(g, seed).unwrap();
            let mut sn = SuperNet::from_seed(model, seed ^ 0xabc).unwrap();
            for p in 0..sn.positions.len() {
                let n = sn.positions[p].alts.len();
                let mut logits = vec![-200.0f32; n];
                logits[rng.random_range(0..n)] = 200.0;
                sn.set_theta(p, &logits).unwrap();
            }
            let expect = sn.expected_cost().unwrap().item() as f64;
            let mut child = sn.discretize().unwrap();
            assert_eq!(child.param_count() as f64, expect, "seed {seed}");
            let shape = child.graph.input_shape();
            let (c, l) = match shape {
                crate::graph::Shape::Series { c, l } => (c, l),
                _ => unreachable!(),
            };
            let x = Tensor::constant(
                &[2, c, l],
                (0..2 * c * l).map(|i| ((i % 13) as f32) * 0.21 - 1.2).collect(),
            )
            .unwrap();
            let mix = sn.forward(&x, false).unwrap();
            let out = child.forward(&x, false).unwrap();
            assert_eq!(*mix.data(), *out.data(), "seed {seed}");
        }
    }

    #[test]
    fn objective_arithmetic_matches_by_hand() {
        let task = Tensor::constant(&[1], vec![0.5f32]).unwrap();
        let cost = Tensor::constant(&[1], vec![53.333f32]).unwrap();
        let loss = nas_loss(&task, &cost, 1e-9).unwrap().item() as f64;
        assert!((loss - 0.500_000_053_333).abs() < 2e-8, "loss {loss}");

        let zero = nas_loss(&task, &cost, 0.0).unwrap().item();
        assert_eq!(zero, 0.5);

        let pure = nas_loss(
            &Tensor::constant(&[1], vec![0.0f32]).unwrap(),
            &cost,
            1e-7,
        )
        .unwrap()
        .item() as f64;
        assert!((pure - 53.333e-7).abs() / 53.333e-7 < 1e-6, "pure {pure}");

        assert!(nas_loss(&task, &cost, -1e-9).is_err());
        assert!(nas_loss(&task, &cost, f64::NAN).is_err());
    }

    #[test]
    fn expansion_is_deterministic_per_seed() {
        let a = SuperNet::from_seed(FloatModel::init(tiny_net(), 5).unwrap(), 7).unwrap();
        let b = SuperNet::from_seed(FloatModel::init(tiny_net(), 5).unwrap(), 7).unwrap();
        assert_eq!(*a.positions[0].dw.dw_w.data(), *b.positions[0].dw.dw_w.data());
        assert_eq!(*a.positions[1].dw.pw_w.data(), *b.positions[1].dw.pw_w.data());
        let c = SuperNet::from_seed(FloatModel::init(tiny_net(), 5).unwrap(), 8).unwrap();
        assert_ne!(*a.positions[0].dw.dw_w.data(), *c.positions[0].dw.dw_w.data());
    }

    #[test]
    fn set_theta_rejects_bad_shapes() {
        let mut sn = SuperNet::from_seed(FloatModel::init(tiny_net(), 0).unwrap(), 1).unwrap();
        assert!(sn.set_theta(0, &[1.0, 2.0]).is_err());
        assert!(sn.set_theta(9, &[1.0, 2.0]).is_err());
    }

    fn ppg_task(seed: u64) -> (crate::model::TrainData, crate::model::TrainData) {
        let recs = synth::generate(&SynthConfig {
            n_subjects: 4,
            seconds: 6.0,
            seed,
            noise: 0.02,
            scalar_only: true,
        })
        .unwrap();
        let (ws, _) = build_windows(&recs, 0.256, 16).unwrap();
        let subs = ws.subjects.clone();
        let train = split::subset(&ws, &subs[..2]);
        let val = split::subset(&ws, &subs[2..]);
        (
            to_train_data(&train, TargetKind::Sbp).unwrap(),
            to_train_data(&val, TargetKind::Sbp).unwrap(),
        )
    }

    fn search_net() -> Graph {
        let mut g = Graph::new(1, 32);
        let c1 = g.push(conv(1, 4, 3, 1, 1), vec![INPUT]);
        let b1 = g.push(LayerSpec::BatchNorm { c: 4 }, vec![c1]);
        let r1 = g.push(LayerSpec::Relu, vec![b1]);
        let c2 = g.push(conv(4, 4, 3, 1, 1), vec![r1]);
        let b2 = g.push(LayerSpec::BatchNorm { c: 4 }, vec![c2]);
        let r2 = g.push(LayerSpec::Relu, vec![b2]);
        let gap = g.push(LayerSpec::GlobalAvgPool, vec![r2]);
        g.push(
            LayerSpec::Linear {
                in_features: 4,
                out_features: 1,
            },
            vec![gap],
        );
        g
    }

    #[test]
    fn alternation_trains_both_parameter_sets() {
        let (train, val) = ppg_task(21);
        let mut sn = SuperNet::from_seed(FloatModel::init(search_net(), 2).unwrap(), 3).unwrap();
        let log = train_supernet(
            &mut sn,
            &train,
            &val,
            &NasTrainConfig {
                epochs: 2,
                batch_size: 32,
                lambda: 0.0,
                ..NasTrainConfig::default()
            },
        )
        .unwrap();
        assert_eq!(log.len(), 2);
        assert!(log.iter().all(|(t, v)| t.is_finite() && v.is_finite()));
        // Logits moved off their zero init during the validation phase.
        assert!(sn.positions.iter().any(|p| p.theta.data().iter().any(|&t| t != 0.0)));
    }

    #[test]
    fn dominant_cost_weight_selects_cheapest_branches() {
        let (train, val) = ppg_task(22);
        let mut sn = SuperNet::from_seed(FloatModel::init(search_net(), 2).unwrap(), 3).unwrap();
        train_supernet(
            &mut sn,
            &train,
            &val,
            &NasTrainConfig {
                epochs: 5,
                batch_size: 32,
                lambda: 1.0,
                ..NasTrainConfig::default()
            },
        )
        .unwrap();
        // Depthwise undercuts the 1-to-4 stem; the square conv vanishes.
        assert_eq!(sn.choices(), [AltKind::Dw, AltKind::Id]);
    }

    #[test]
    fn rejects_bad_training_inputs() {
        let (train, val) = ppg_task(23);
        let mut sn = SuperNet::from_seed(FloatModel::init(search_net(), 2).unwrap(), 3).unwrap();
        let bad = NasTrainConfig {
            lambda: -0.5,
            ..NasTrainConfig::default()
        };
        assert!(train_supernet(&mut sn, &train, &val, &bad).is_err());
        let zero_batch = NasTrainConfig {
            batch_size: 0,
            ..NasTrainConfig::default()
        };
        assert!(train_supernet(&mut sn, &train, &val, &zero_batch).is_err());
        let empty = crate::model::TrainData {
            n: 0,
            c: 1,
            l: 32,
            x: Vec::new(),
            target: crate::model::Target::Scalar(Vec::new()),
        };
        let cfg = NasTrainConfig::default();
        assert!(train_supernet(&mut sn, &empty, &val, &cfg).is_err());
        assert!(train_supernet(&mut sn, &train, &empty, &cfg).is_err());
    }
}
