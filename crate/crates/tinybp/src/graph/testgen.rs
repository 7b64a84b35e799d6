//! Random valid graph generation for property tests and corpus seeding.
//! Every produced graph passes `validate`; shapes are tracked while
//! generating so only legal layers are ever appended.

use rand::Rng;

use super::{Graph, LayerSpec, INPUT};

#[derive(Debug, Clone, Copy)]
pub struct GenConfig {
    pub max_nodes: usize,
    /// End with pooling + linear to a single value instead of a 1x1 conv.
    pub scalar_head: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            max_nodes: 24,
            scalar_head: true,
        }
    }
}

pub fn random_graph(rng: &mut impl Rng, cfg: &GenConfig) -> Graph {
    let mut g = Graph::new(rng.random_range(1..=3), 8 << rng.random_range(0..4));
    let mut prev = INPUT;
    let mut c = g.input_channels;
    let mut l = g.input_len;

    // Keep headroom for the largest step (4 nodes) plus the head (2 nodes).
    while g.nodes.len() + 6 < cfg.max_nodes {
        match rng.random_range(0..10) {
            0..=2 => {
                let c_out = rng.random_range(1..=8);
                let k = *pick(rng, &[1usize, 3, 5], |&k| k <= l);
                let padding = if k > 1 && rng.random_bool(0.7) { k / 2 } else { 0 };
                let stride = if l >= k + 2 && rng.random_bool(0.3) { 2 } else { 1 };
                let spec = if rng.random_bool(0.3) {
                    LayerSpec::DwBlock {
                        c_in: c,
                        c_out,
                        k,
                        stride,
                        padding,
                    }
                } else {
                    LayerSpec::Conv1d {
                        c_in: c,
                        c_out,
                        k,
                        stride,
                        padding,
                    }
                };
                prev = g.push(spec, vec![prev]);
                c = c_out;
                l = (l + 2 * padding - k) / stride + 1;
            }
            3 => {
                prev = g.push(LayerSpec::BatchNorm { c }, vec![prev]);
                prev = g.push(LayerSpec::Relu, vec![prev]);
            }
            4 if l >= 4 => {
                let spec = if rng.random_bool(0.5) {
                    LayerSpec::MaxPool { k: 2, stride: 2 }
                } else {
                    LayerSpec::AvgPool { k: 2, stride: 2 }
                };
                prev = g.push(spec, vec![prev]);
                l = (l - 2) / 2 + 1;
            }
            5 if l <= 128 => {
                prev = g.push(LayerSpec::Upsample { factor: 2 }, vec![prev]);
                l *= 2;
            }
            6 if l >= 3 => {
                // Shape-preserving residual branch.
                let conv = g.push(
                    LayerSpec::Conv1d {
                        c_in: c,
                        c_out: c,
                        k: 3,
                        stride: 1,
                        padding: 1,
                    },
                    vec![prev],
                );
                let bn = g.push(LayerSpec::BatchNorm { c }, vec![conv]);
                let add = g.push(LayerSpec::Add, vec![bn, prev]);
                prev = g.push(LayerSpec::Relu, vec![add]);
            }
            7 => {
                // Two pointwise branches merged by channel concatenation.
                let a = rng.random_range(1..=4);
                let b = rng.random_range(1..=4);
                let left = g.push(
                    LayerSpec::Conv1d {
                        c_in: c,
                        c_out: a,
                        k: 1,
                        stride: 1,
                        padding: 0,
                    },
                    vec![prev],
                );
                let right = g.push(
                    LayerSpec::Conv1d {
                        c_in: c,
                        c_out: b,
                        k: 1,
                        stride: 1,
                        padding: 0,
                    },
                    vec![prev],
                );
                prev = g.push(LayerSpec::Concat, vec![left, right]);
                c = a + b;
            }
            8 => {
                prev = g.push(LayerSpec::Identity, vec![prev]);
            }
            _ => {
                prev = g.push(LayerSpec::Relu, vec![prev]);
            }
        }
    }

    if cfg.scalar_head {
        let gap = g.push(LayerSpec::GlobalAvgPool, vec![prev]);
        g.push(
            LayerSpec::Linear {
                in_features: c,
                out_features: 1,
            },
            vec![gap],
        );
    } else {
        g.push(
            LayerSpec::Conv1d {
                c_in: c,
                c_out: 1,
                k: 1,
                stride: 1,
                padding: 0,
            },
            vec![prev],
        );
    }
    g
}

fn pick<'a, T, F: Fn(&T) -> bool>(rng: &mut impl Rng, items: &'a [T], ok: F) -> &'a T {
    let legal: Vec<&T> = items.iter().filter(|t| ok(t)).collect();
    legal[rng.random_range(0..legal.len())]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generated_graphs_always_validate() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..200 {
            let scalar = i % 2 == 0;
            let g = random_graph(
                &mut rng,
                &GenConfig {
                    max_nodes: 8 + i % 24,
                    scalar_head: scalar,
                },
            );
            g.validate().unwrap_or_else(|e| panic!("graph {i}: {e}"));
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let g1 = random_graph(&mut ChaCha8Rng::seed_from_u64(7), &GenConfig::default());
        let g2 = random_graph(&mut ChaCha8Rng::seed_from_u64(7), &GenConfig::default());
        assert_eq!(g1, g2);
    }
}
