//! Simulated multi-device evaluation of the sigmoid loss.
//!
//! The global batch of `|B|` pairs is split over `D` devices, `b = |B|/D`
//! rows each. In the chunked strategy every device starts with its own text
//! shard (which holds all of its positives), then receives the neighbouring
//! device's shard `D − 1` times through a collective permute. At any moment a
//! device holds only one `b × b` block of similarities. The all-gather
//! baseline instead collects every shard and materializes a `b × |B|` block.
//!
//! Devices run one after another in a fixed round-robin. The simulator models
//! dataflow and cost counters, not wall-clock parallelism.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{sigmoid_block, LossGrads, LossParams, SigmoidBlock};
use crate::math::Matrix;

/// Partition of a global batch across simulated devices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardPlan {
    pub n_global: usize,
    pub n_devices: usize,
    pub per_device: usize,
}

impl ShardPlan {
    pub fn new(n_global: usize, n_devices: usize) -> Result<Self> {
        if n_devices == 0 || n_global == 0 || !n_global.is_multiple_of(n_devices) {
            return Err(Error::IndivisibleBatch {
                n: n_global,
                devices: n_devices,
            });
        }
        Ok(ShardPlan {
            n_global,
            n_devices,
            per_device: n_global / n_devices,
        })
    }

    /// Global row range owned by `device`.
    pub fn rows(&self, device: usize) -> std::ops::Range<usize> {
        device * self.per_device..(device + 1) * self.per_device
    }
}

/// Tracks how many similarity entries a device holds at once.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MemoryMeter {
    current: usize,
    peak: usize,
}

impl MemoryMeter {
    pub fn materialize(&mut self, entries: usize) {
        self.current += entries;
        self.peak = self.peak.max(self.current);
    }

    pub fn release(&mut self, entries: usize) {
        self.current -= entries;
    }

    pub fn peak(&self) -> usize {
        self.peak
    }
}

/// One simulated device.
#[derive(Debug, Clone)]
pub struct DeviceState {
    pub device_id: usize,
    pub local_images: Matrix,
    pub resident_texts: Matrix,
    /// Which device originally owned `resident_texts`.
    pub resident_shard: usize,
    pub partial_loss: f64,
    /// Gradient sums for the local image rows, before the factor `t`.
    pub image_grads: Matrix,
    /// Gradient sums for the resident text shard; travels with the shard.
    pub text_grad_buffer: Matrix,
    g_sum: f64,
    g_dot_sum: f64,
    pos_logit_sum: f64,
    neg_logit_sum: f64,
    pub meter: MemoryMeter,
}

impl DeviceState {
    fn absorb(&mut self, block: &SigmoidBlock, text_grads: &mut Matrix) {
        self.partial_loss += block.loss_sum;
        self.image_grads
            .add_assign(&block.d_x)
            .expect("block rows match local rows");
        text_grads
            .add_assign(&block.d_y)
            .expect("block columns match shard rows");
        self.g_sum += block.g_sum;
        self.g_dot_sum += block.g_dot_sum;
        self.pos_logit_sum += block.pos_logit_sum;
        self.neg_logit_sum += block.neg_logit_sum;
    }
}

/// Communication and memory counters for one evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommStats {
    /// Text-shard hops, counted per device per round.
    pub permutes_executed: usize,
    /// Embedding floats moved during the forward pass.
    pub floats_transferred: usize,
    /// Gradient floats moved on the way back.
    pub grad_floats_transferred: usize,
    pub peak_similarity_entries_per_device: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShardStrategy {
    Chunked,
    Allgather,
}

impl std::fmt::Display for ShardStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ShardStrategy::Chunked => "chunked",
            ShardStrategy::Allgather => "allgather",
        })
    }
}

impl std::str::FromStr for ShardStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chunked" => Ok(ShardStrategy::Chunked),
            "allgather" => Ok(ShardStrategy::Allgather),
            other => Err(Error::config("shard_strategy", format!("unknown `{other}`"))),
        }
    }
}

/// Loss, gradients and cost counters from a sharded evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardedLoss {
    pub value: f64,
    pub grads: LossGrads,
    pub stats: CommStats,
    pub positive_logit_mean: f64,
    pub negative_logit_mean: f64,
}

/// Flat per-run record emitted for the command line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub n: usize,
    #[serde(rename = "D")]
    pub devices: usize,
    pub b: usize,
    pub strategy: ShardStrategy,
    pub peak_entries: usize,
    pub floats_transferred: usize,
    pub permutes: usize,
}

impl RunStats {
    pub fn new(plan: &ShardPlan, strategy: ShardStrategy, stats: &CommStats) -> Self {
        RunStats {
            n: plan.n_global,
            devices: plan.n_devices,
            b: plan.per_device,
            strategy,
            peak_entries: stats.peak_similarity_entries_per_device,
            floats_transferred: stats.floats_transferred,
            permutes: stats.permutes_executed,
        }
    }
}

/// Splits the batch so that device `k` holds rows `k·b .. (k+1)·b`.
pub fn shard(zimg: &Matrix, ztxt: &Matrix, devices: usize) -> Result<Vec<DeviceState>> {
    if zimg.shape() != ztxt.shape() {
        return Err(Error::ShapeMismatch(format!(
            "image batch {:?} vs text batch {:?}",
            zimg.shape(),
            ztxt.shape()
        )));
    }
    let plan = ShardPlan::new(zimg.rows(), devices)?;
    let d = zimg.cols();
    Ok((0..devices)
        .map(|k| {
            let rows = plan.rows(k);
            DeviceState {
                device_id: k,
                local_images: zimg.slice_rows(rows.start, rows.end),
                resident_texts: ztxt.slice_rows(rows.start, rows.end),
                resident_shard: k,
                partial_loss: 0.0,
                image_grads: Matrix::zeros(plan.per_device, d),
                text_grad_buffer: Matrix::zeros(plan.per_device, d),
                g_sum: 0.0,
                g_dot_sum: 0.0,
                pos_logit_sum: 0.0,
                neg_logit_sum: 0.0,
                meter: MemoryMeter::default(),
            }
        })
        .collect())
}

fn check_plan(plan: &ShardPlan, zimg: &Matrix) -> Result<()> {
    if plan.n_global != zimg.rows() {
        return Err(Error::ShapeMismatch(format!(
            "plan for {} rows applied to a batch of {}",
            plan.n_global,
            zimg.rows()
        )));
    }
    ShardPlan::new(plan.n_global, plan.n_devices).map(|_| ())
}

/// Final cross-device sum shared by both strategies.
fn reduce(
    plan: &ShardPlan,
    devices: &[DeviceState],
    text_grads: Vec<Matrix>,
    params: &LossParams,
    stats: CommStats,
) -> Result<ShardedLoss> {
    let n = plan.n_global;
    let t = params.temperature();
    let mut loss = 0.0;
    let (mut g_sum, mut g_dot_sum, mut pos, mut neg) = (0.0, 0.0, 0.0, 0.0);
    for dev in devices {
        loss += dev.partial_loss;
        g_sum += dev.g_sum;
        g_dot_sum += dev.g_dot_sum;
        pos += dev.pos_logit_sum;
        neg += dev.neg_logit_sum;
    }
    let image_grads: Vec<Matrix> = devices.iter().map(|d| d.image_grads.clone()).collect();
    let n_neg = n * n - n;
    Ok(ShardedLoss {
        value: loss / n as f64,
        grads: LossGrads {
            d_zimg: Matrix::vstack(&image_grads)?.scale(t),
            d_ztxt: Matrix::vstack(&text_grads)?.scale(t),
            d_t_prime: t * g_dot_sum,
            d_bias: g_sum,
        },
        stats,
        positive_logit_mean: pos / n as f64,
        negative_logit_mean: if n_neg == 0 { 0.0 } else { neg / n_neg as f64 },
    })
}

/// Chunked sigmoid loss: `D` rounds of `b × b` blocks with `D − 1` neighbour
/// permutes. Device `k` receives the shard previously held by `(k + 1) mod D`.
pub fn chunked_sigmoid_loss(
    plan: &ShardPlan,
    zimg: &Matrix,
    ztxt: &Matrix,
    params: &LossParams,
) -> Result<ShardedLoss> {
    check_plan(plan, zimg)?;
    let mut devices = shard(zimg, ztxt, plan.n_devices)?;
    let (n, b, d) = (plan.n_global, plan.per_device, zimg.cols());
    let count = plan.n_devices;
    let mut stats = CommStats::default();

    for round in 0..count {
        if round > 0 {
            // Collective permute: texts and their gradient buffers move together.
            let mut shards: Vec<(Matrix, Matrix, usize)> = devices
                .iter_mut()
                .map(|dev| {
                    (
                        std::mem::replace(&mut dev.resident_texts, Matrix::zeros(1, 1)),
                        std::mem::replace(&mut dev.text_grad_buffer, Matrix::zeros(1, 1)),
                        dev.resident_shard,
                    )
                })
                .collect();
            shards.rotate_left(1);
            for (dev, (texts, buffer, owner)) in devices.iter_mut().zip(shards) {
                dev.resident_texts = texts;
                dev.text_grad_buffer = buffer;
                dev.resident_shard = owner;
            }
            stats.permutes_executed += count;
            stats.floats_transferred += count * b * d;
            stats.grad_floats_transferred += count * b * d;
        }
        for dev in devices.iter_mut() {
            dev.meter.materialize(b * b);
            let block = sigmoid_block(
                &dev.local_images,
                &dev.resident_texts,
                dev.device_id * b,
                dev.resident_shard * b,
                n,
                params,
                None,
                None,
            );
            dev.meter.release(b * b);
            let mut buffer = std::mem::replace(&mut dev.text_grad_buffer, Matrix::zeros(1, 1));
            dev.absorb(&block, &mut buffer);
            dev.text_grad_buffer = buffer;
        }
    }

    // Gradient buffers go home through the inverse of the accumulated rotation.
    let mut text_grads = vec![Matrix::zeros(b, d); count];
    for dev in devices.iter_mut() {
        if dev.resident_shard != dev.device_id {
            stats.grad_floats_transferred += b * d;
        }
        text_grads[dev.resident_shard] = std::mem::replace(&mut dev.text_grad_buffer, Matrix::zeros(1, 1));
    }
    stats.peak_similarity_entries_per_device = devices.iter().map(|d| d.meter.peak()).max().unwrap_or(0);
    reduce(plan, &devices, text_grads, params, stats)
}

/// All-gather baseline: every device gathers all image and text shards, then
/// scores its own rows against all `|B|` texts.
pub fn allgather_sigmoid_loss(
    plan: &ShardPlan,
    zimg: &Matrix,
    ztxt: &Matrix,
    params: &LossParams,
) -> Result<ShardedLoss> {
    check_plan(plan, zimg)?;
    let mut devices = shard(zimg, ztxt, plan.n_devices)?;
    let (n, b, d) = (plan.n_global, plan.per_device, zimg.cols());
    let count = plan.n_devices;
    let mut stats = CommStats {
        // Two all-gathers: each device receives the other D − 1 shards twice.
        floats_transferred: 2 * count * (count - 1) * b * d,
        // Reduce-scatter of text gradients back to their owners.
        grad_floats_transferred: count * (count - 1) * b * d,
        ..CommStats::default()
    };
    let mut text_grads = vec![Matrix::zeros(b, d); count];
    for dev in devices.iter_mut() {
        dev.meter.materialize(b * n);
        let block = sigmoid_block(&dev.local_images, ztxt, dev.device_id * b, 0, n, params, None, None);
        dev.meter.release(b * n);
        let mut all_texts = Matrix::zeros(n, d);
        dev.absorb(&block, &mut all_texts);
        for (owner, acc) in text_grads.iter_mut().enumerate() {
            let rows = plan.rows(owner);
            acc.add_assign(&all_texts.slice_rows(rows.start, rows.end))?;
        }
    }
    stats.peak_similarity_entries_per_device = devices.iter().map(|d| d.meter.peak()).max().unwrap_or(0);
    reduce(plan, &devices, text_grads, params, stats)
}

/// Dispatches on strategy.
pub fn sharded_sigmoid_loss(
    strategy: ShardStrategy,
    plan: &ShardPlan,
    zimg: &Matrix,
    ztxt: &Matrix,
    params: &LossParams,
) -> Result<ShardedLoss> {
    match strategy {
        ShardStrategy::Chunked => chunked_sigmoid_loss(plan, zimg, ztxt, params),
        ShardStrategy::Allgather => allgather_sigmoid_loss(plan, zimg, ztxt, params),
    }
}
