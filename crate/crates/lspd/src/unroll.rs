//! Unrolled primal-dual architectures: LPD, LSPD, LSPD-VR and the
//! projection-based simplified recursion.
//!
//! One layer applies a dual subnet on the (subset) sinogram followed by a
//! primal subnet on the image. Subnets are three 5x5 convolutions with
//! PReLU activations between them, a zero-initialized final convolution and
//! an additive skip connection from the state channel. The trainable step
//! scalars `tau_k`, `sigma_k` multiply the operator-derived input channel of
//! each subnet.
//!
//! Channel order is part of the contract:
//! dual input  `[S_i b, sigma_k * S_i A x_k, y_k]`,
//! primal input `[tau_k * (S_i A)^T y_{k+1}, x_k]`.

use crate::autodiff::{
    load_checkpoint, save_checkpoint, ConvLayer, NodeId, ParamSet, PreluLayer, Tape, Tensor,
};
use crate::error::{Error, Result};
use crate::linops::{partition, CallCounter, LinearOperator, PartitionScheme, SubsetPartition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Lpd,
    Lspd,
    LspdVr,
    Simplified,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cyclic,
    UniformRandom,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnrollConfig {
    pub variant: Variant,
    pub k_layers: usize,
    pub m: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default)]
    pub schedule: Schedule,
    /// Carry the dual buffer across subset switches (the update rule reuses
    /// `y_k` without reindexing). When false the buffer is reset to zero on
    /// every subset change.
    #[serde(default = "default_true")]
    pub carry_dual: bool,
}

fn default_hidden() -> usize {
    16
}

fn default_true() -> bool {
    true
}

impl UnrollConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_layers == 0 {
            return Err(Error::Config("k_layers must be >= 1".into()));
        }
        if self.m == 0 {
            return Err(Error::Config("subset count m must be >= 1".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden channel count must be >= 1".into()));
        }
        if self.variant == Variant::Lpd && self.m != 1 {
            return Err(Error::Config("lpd is full-batch; set m = 1".into()));
        }
        if self.variant == Variant::Simplified {
            return Err(Error::Config(
                "the simplified variant has no trainable network; use the theory harness".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct SubnetBinding {
    conv1: ConvLayer,
    act1: PreluLayer,
    conv2: ConvLayer,
    act2: PreluLayer,
    conv3: ConvLayer,
}

impl SubnetBinding {
    fn register(
        params: &mut ParamSet,
        name: &str,
        in_ch: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv1: ConvLayer::register(params, &format!("{name}.conv1"), hidden, in_ch, 5, rng, false),
            act1: PreluLayer::register(params, &format!("{name}.act1"), hidden),
            conv2: ConvLayer::register(params, &format!("{name}.conv2"), hidden, hidden, 5, rng, false),
            act2: PreluLayer::register(params, &format!("{name}.act2"), hidden),
            // Zero-initialized so an untrained layer is the identity around
            // its skip connection.
            conv3: ConvLayer::register(params, &format!("{name}.conv3"), 1, hidden, 5, rng, true),
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        input: NodeId,
        state: NodeId,
    ) -> Result<NodeId> {
        let h = self.conv1.forward(tape, params, input)?;
        let h = self.act1.forward(tape, params, h)?;
        let h = self.conv2.forward(tape, params, h)?;
        let h = self.act2.forward(tape, params, h)?;
        let out = self.conv3.forward(tape, params, h)?;
        tape.add(out, state)
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerBinding {
    dual: SubnetBinding,
    primal: SubnetBinding,
    tau: usize,
    sigma: usize,
}

/// A trainable unrolled network: per-layer dual/primal subnets plus step
/// scalars.
#[derive(Clone, Debug)]
pub struct UnrollNet {
    pub cfg: UnrollConfig,
    pub params: ParamSet,
    layers: Vec<LayerBinding>,
    init_step: f32,
}

/// Output handle of one forward pass.
pub struct ForwardPass {
    pub output: NodeId,
    /// Per-layer primal iterates, if requested.
    pub snapshots: Vec<Tensor>,
}

impl UnrollNet {
    /// Builds a freshly initialized network. `op_norm` seeds the trainable
    /// step scalars at `1 / ||A||` so operator-derived channels start at the
    /// scale of their state channels.
    pub fn build(cfg: UnrollConfig, op_norm: f64, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init_step = if op_norm > 0.0 {
            (1.0 / op_norm) as f32
        } else {
            1.0
        };
        let mut layers = Vec::with_capacity(cfg.k_layers);
        for k in 0..cfg.k_layers {
            let dual = SubnetBinding::register(
                &mut params,
                &format!("layer{k}.dual"),
                3,
                cfg.hidden,
                &mut rng,
            );
            let primal = SubnetBinding::register(
                &mut params,
                &format!("layer{k}.primal"),
                2,
                cfg.hidden,
                &mut rng,
            );
            let sigma = params.register(&format!("layer{k}.sigma"), Tensor::scalar(init_step));
            let tau = params.register(&format!("layer{k}.tau"), Tensor::scalar(init_step));
            layers.push(LayerBinding {
                dual,
                primal,
                tau,
                sigma,
            });
        }
        Ok(Self {
            cfg,
            params,
            layers,
            init_step,
        })
    }

    /// Subset visit order for `k_layers` layers.
    pub fn schedule_order(&self, seed: Option<u64>) -> Result<Vec<usize>> {
        match self.cfg.schedule {
            Schedule::Cyclic => Ok((0..self.cfg.k_layers).map(|k| k % self.cfg.m).collect()),
            Schedule::UniformRandom => {
                let seed = seed.ok_or_else(|| {
                    Error::Config("uniform_random schedule requires a seed".into())
                })?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Ok((0..self.cfg.k_layers)
                    .map(|_| rng.gen_range(0..self.cfg.m))
                    .collect())
            }
        }
    }

    /// Runs the unrolled network on one measurement, building the graph on
    /// `tape`. `part` may be omitted for full-batch (m = 1) operation.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        op: &Arc<LinearOperator>,
        part: Option<&Arc<SubsetPartition>>,
        b: &[f32],
        x0: &[f32],
        schedule_seed: Option<u64>,
        want_snapshots: bool,
    ) -> Result<ForwardPass> {
        let owned_part;
        let part = match part {
            Some(p) => {
                if p.m() != self.cfg.m {
                    return Err(Error::Config(format!(
                        "partition has m = {}, network expects m = {}",
                        p.m(),
                        self.cfg.m
                    )));
                }
                p
            }
            None => {
                if self.cfg.m != 1 {
                    return Err(Error::Config(
                        "stochastic variants need a subset partition".into(),
                    ));
                }
                owned_part = Arc::new(partition(op, 1, PartitionScheme::Contiguous)?);
                &owned_part
            }
        };
        if b.len() != op.rows() {
            return Err(Error::DimMismatch {
                expected: op.rows(),
                got: b.len(),
                context: "measurement length",
            });
        }
        let d = op.cols();
        let size = (d as f64).sqrt().round() as usize;
        if size * size != d {
            return Err(Error::Config("operator image space is not square".into()));
        }
        if x0.len() != d {
            return Err(Error::DimMismatch {
                expected: d,
                got: x0.len(),
                context: "x0 length",
            });
        }
        let blocks = op
            .angle_blocks()
            .ok_or_else(|| Error::Config("operator has no angle layout".into()))?;
        let sub_angles = blocks.n_angles / part.m();
        let n_rays = blocks.n_rays;
        let order = self.schedule_order(schedule_seed)?;

        // Per-subset measurement slices as constant leaves, created lazily.
        let mut b_leaf: Vec<Option<NodeId>> = vec![None; part.m()];

        let mut x = tape.leaf(Tensor::new(vec![1, size, size], x0.to_vec()));
        let mut y = tape.leaf(Tensor::zeros(vec![1, sub_angles, n_rays]));
        let mut memories: Vec<NodeId> = if self.cfg.variant == Variant::LspdVr {
            (0..part.m())
                .map(|_| tape.leaf(Tensor::zeros(vec![d])))
                .collect()
        } else {
            Vec::new()
        };
        let mut snapshots = Vec::new();
        let mut prev_subset = None;

        for (k, layer) in self.layers.iter().enumerate() {
            let i = order[k];
            if !self.cfg.carry_dual && prev_subset.is_some() && prev_subset != Some(i) {
                y = tape.leaf(Tensor::zeros(vec![1, sub_angles, n_rays]));
            }
            prev_subset = Some(i);

            let b_sub = match b_leaf[i] {
                Some(id) => id,
                None => {
                    let vals: Vec<f32> = part.rows_of(i)?.iter().map(|&r| b[r]).collect();
                    let id = tape.leaf(Tensor::new(vec![1, sub_angles, n_rays], vals));
                    b_leaf[i] = Some(id);
                    id
                }
            };

            // Dual: y_{k+1} = D(y_k, sigma_k, S_i A x_k, S_i b).
            let x_flat = tape.reshape(x, vec![d])?;
            let sax = tape.linop(x_flat, op, Some((part, i)), false)?;
            let sax_2d = tape.reshape(sax, vec![1, sub_angles, n_rays])?;
            let sigma = tape.param(&self.params, layer.sigma);
            let sax_scaled = tape.scale_by(sax_2d, sigma)?;
            let dual_in = tape.concat_channels(&[b_sub, sax_scaled, y])?;
            let y_new = layer.dual.forward(tape, &self.params, dual_in, y)?;

            // Primal: x_{k+1} = P(x_k, tau_k, (S_i A)^T y_{k+1}).
            let y_flat = tape.reshape(y_new, vec![part.q()])?;
            let aty = tape.linop(y_flat, op, Some((part, i)), true)?;
            let operator_channel = match self.cfg.variant {
                Variant::LspdVr => {
                    memories[i] = aty;
                    let mut sum = memories[0];
                    for &h in &memories[1..] {
                        sum = tape.add(sum, h)?;
                    }
                    sum
                }
                _ => aty,
            };
            let op_2d = tape.reshape(operator_channel, vec![1, size, size])?;
            let tau = tape.param(&self.params, layer.tau);
            let op_scaled = tape.scale_by(op_2d, tau)?;
            let primal_in = tape.concat_channels(&[op_scaled, x])?;
            let x_new = layer.primal.forward(tape, &self.params, primal_in, x)?;

            y = y_new;
            x = x_new;
            if want_snapshots {
                snapshots.push(tape.value(x).clone());
            }
        }
        Ok(ForwardPass {
            output: x,
            snapshots,
        })
    }

    /// Inference: runs a forward pass and returns the image plus the
    /// operator-call accounting of that pass.
    pub fn reconstruct(
        &self,
        op: &Arc<LinearOperator>,
        part: &Arc<SubsetPartition>,
        b: &[f32],
        x0: &[f32],
        schedule_seed: Option<u64>,
    ) -> Result<(Vec<f32>, CallCounter)> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, op, Some(part), b, x0, schedule_seed, false)?;
        let out = tape.value(pass.output).data().to_vec();
        Ok((out, tape.counter))
    }

    fn meta(&self) -> Vec<(String, Tensor)> {
        let variant_code = match self.cfg.variant {
            Variant::Lpd => 0.0,
            Variant::Lspd => 1.0,
            Variant::LspdVr => 2.0,
            Variant::Simplified => 3.0,
        };
        let schedule_code = match self.cfg.schedule {
            Schedule::Cyclic => 0.0,
            Schedule::UniformRandom => 1.0,
        };
        vec![
            ("__meta.variant".into(), Tensor::scalar(variant_code)),
            ("__meta.schedule".into(), Tensor::scalar(schedule_code)),
            (
                "__meta.k_layers".into(),
                Tensor::scalar(self.cfg.k_layers as f32),
            ),
            ("__meta.m".into(), Tensor::scalar(self.cfg.m as f32)),
            ("__meta.hidden".into(), Tensor::scalar(self.cfg.hidden as f32)),
            (
                "__meta.carry_dual".into(),
                Tensor::scalar(if self.cfg.carry_dual { 1.0 } else { 0.0 }),
            ),
            ("__meta.init_step".into(), Tensor::scalar(self.init_step)),
        ]
    }

    /// Saves variant, schedule and all parameters in the checkpoint format.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.meta(), &self.params)
    }

    /// Restores a network (architecture from the header, weights by name).
    pub fn load(path: &Path) -> Result<Self> {
        let entries = load_checkpoint(path)?;
        let mut meta = std::collections::BTreeMap::new();
        let mut tensors = Vec::new();
        for (name, t) in entries {
            if let Some(stripped) = name.strip_prefix("__meta.") {
                meta.insert(stripped.to_string(), t.item());
            } else {
                tensors.push((name, t));
            }
        }
        let get = |key: &str| -> Result<f32> {
            meta.get(key)
                .copied()
                .ok_or_else(|| Error::CheckpointFormat(format!("missing header field {key}")))
        };
        let variant = match get("variant")? as i32 {
            0 => Variant::Lpd,
            1 => Variant::Lspd,
            2 => Variant::LspdVr,
            _ => return Err(Error::CheckpointFormat("unknown variant code".into())),
        };
        let schedule = match get("schedule")? as i32 {
            0 => Schedule::Cyclic,
            1 => Schedule::UniformRandom,
            _ => return Err(Error::CheckpointFormat("unknown schedule code".into())),
        };
        let cfg = UnrollConfig {
            variant,
            k_layers: get("k_layers")? as usize,
            m: get("m")? as usize,
            hidden: get("hidden")? as usize,
            schedule,
            carry_dual: get("carry_dual")? != 0.0,
        };
        let init_step = get("init_step")? as f64;
        let mut net = Self::build(
            cfg,
            if init_step > 0.0 { 1.0 / init_step } else { 0.0 },
            0,
        )?;
        for (name, tensor) in tensors {
            let id = net.params.id(&name).ok_or_else(|| {
                Error::CheckpointFormat(format!("checkpoint parameter {name} not in network"))
            })?;
            if net.params.value(id).dims() != tensor.dims() {
                return Err(Error::CheckpointFormat(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    tensor.dims(),
                    net.params.value(id).dims()
                )));
            }
            *net.params.value_mut(id) = tensor;
        }
        Ok(net)
    }
}

/// Trace of the learned-free simplified recursion.
pub struct SimplifiedRun {
    /// Iterates `x_0 ..= x_K`.
    pub iterates: Vec<Vec<f64>>,
    pub counter: CallCounter,
}

/// The dual-free recurrent recursion: residual dual update and a projection
/// step with a fixed step size, visiting subsets uniformly at random.
///
/// `project` is the (approximate) manifold projection supplied by the theory
/// harness. Runs in double precision.
#[allow(clippy::too_many_arguments)]
pub fn simplified_lspd_forward(
    mut project: impl FnMut(&[f64]) -> Vec<f64>,
    op: &LinearOperator,
    part: &SubsetPartition,
    b: &[f64],
    x0: &[f64],
    tau: f64,
    k_layers: usize,
    seed: u64,
) -> Result<SimplifiedRun> {
    if b.len() != op.rows() {
        return Err(Error::DimMismatch {
            expected: op.rows(),
            got: b.len(),
            context: "measurement length",
        });
    }
    if !(tau > 0.0) {
        return Err(Error::Config("tau must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counter = CallCounter::default();
    let mut x = x0.to_vec();
    let mut iterates = Vec::with_capacity(k_layers + 1);
    iterates.push(x.clone());
    for _ in 0..k_layers {
        let i = rng.gen_range(0..part.m());
        let rows = part.rows_of(i)?;
        let sax = op.apply_subset_f64(&x, part, i)?;
        counter.count_forward(part.q());
        let y: Vec<f64> = sax
            .iter()
            .zip(rows.iter().map(|&r| b[r]))
            .map(|(&ax, bv)| ax - bv)
            .collect();
        let grad = op.adjoint_subset_f64(&y, part, i)?;
        counter.count_adjoint(part.q());
        let stepped: Vec<f64> = x.iter().zip(&grad).map(|(&xv, &g)| xv - tau * g).collect();
        x = project(&stepped);
        iterates.push(x.clone());
    }
    Ok(SimplifiedRun { iterates, counter })
}
