//! Competitive dense blocks: the repeated unit of every network in the zoo.
//!
//! A block is a chain of composite units (activation, convolution, batch
//! norm) whose batch-norm outputs compete through a running elementwise
//! maximum instead of being concatenated. Input blocks normalize raw inputs
//! by replacing the first activation with a batch norm, so they open with a
//! BN-Conv-BN entry. The optional attention variant replaces the plain
//! running maximum with per-pixel soft weights over the competing feature
//! responses.

use crate::autograd::{BnBatchStats, BnMode, Graph, GraphError, NodeId, BN_MOMENTUM};
use crate::params::{he_init, ParamId, ParamStore};
use crate::tensor::Real;
use ndarray::{s, Array1, Array4};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Static shape of one block family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub filters: usize,
    /// (kh, kw); (3, 3) runs four composite units, (5, 5) runs the original
    /// two wide units plus a trailing 1x1 mixing unit. Both layouts have a
    /// 9x9 receptive field per block.
    pub kernel: (usize, usize),
    /// Soft competition on the native-resolution blocks (pre-input and
    /// post-output); interior blocks always compete by plain maximum.
    #[serde(default)]
    pub attention: bool,
}

impl BlockConfig {
    /// Kernel sizes of the composite units in chain order.
    pub fn unit_kernels(&self) -> Vec<(usize, usize)> {
        match self.kernel {
            (5, 5) => vec![(5, 5), (5, 5), (1, 1)],
            k => vec![k; 4],
        }
    }
}

/// Entry behaviour: standard blocks activate their input with PReLU; input
/// blocks normalize raw inputs with a batch norm instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Standard,
    Input,
}

#[derive(Debug, Clone)]
pub enum ActParams {
    Prelu { alpha: ParamId },
    EntryBn(BnParams),
}

#[derive(Debug, Clone)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Debug, Clone)]
pub struct UnitParams {
    pub act: ActParams,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub bn: BnParams,
}

/// Parameters of the soft competition: a 3x3 squeeze conv with half the
/// block filters, a PReLU, and a 1x1 conv emitting one weight map per
/// competing response (interior convolutions plus one for the entry output),
/// normalized per pixel by a channel softmax.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub squeeze_w: ParamId,
    pub squeeze_b: ParamId,
    pub squeeze_alpha: ParamId,
    pub mix_w: ParamId,
    pub mix_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub name: String,
    pub kind: BlockKind,
    pub units: Vec<UnitParams>,
    pub attention: Option<AttentionParams>,
}

fn insert_bn<T: Real>(store: &mut ParamStore<T>, prefix: &str, c: usize) -> BnParams {
    BnParams {
        gamma: store.insert(format!("{prefix}.gamma"), Array4::ones((1, c, 1, 1)), true),
        beta: store.insert(format!("{prefix}.beta"), Array4::zeros((1, c, 1, 1)), true),
        running_mean: store.insert(format!("{prefix}.running_mean"), Array4::zeros((1, c, 1, 1)), false),
        running_var: store.insert(format!("{prefix}.running_var"), Array4::ones((1, c, 1, 1)), false),
    }
}

/// Registers every tensor of one block. `attended` adds the soft-competition
/// parameters (used on the native-resolution input and output blocks).
pub fn build_block<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    in_channels: usize,
    cfg: &BlockConfig,
    kind: BlockKind,
    attended: bool,
) -> BlockParams {
    let f = cfg.filters;
    let mut units = Vec::new();
    let mut c_in = in_channels;
    for (k, (kh, kw)) in cfg.unit_kernels().into_iter().enumerate() {
        let prefix = format!("{name}.unit{k}");
        let act = if k == 0 && kind == BlockKind::Input {
            ActParams::EntryBn(insert_bn(store, &format!("{prefix}.entry_bn"), c_in))
        } else {
            ActParams::Prelu {
                alpha: store.insert(
                    format!("{prefix}.act.alpha"),
                    Array4::from_elem((1, c_in, 1, 1), T::from_f64(0.25)),
                    true,
                ),
            }
        };
        let conv_w = store.insert(
            format!("{prefix}.conv.weight"),
            he_init(rng, (f, c_in, kh, kw)),
            true,
        );
        let conv_b = store.insert(format!("{prefix}.conv.bias"), Array4::zeros((1, f, 1, 1)), true);
        let bn = insert_bn(store, &format!("{prefix}.bn"), f);
        units.push(UnitParams { act, conv_w, conv_b, bn });
        c_in = f;
    }
    let attention = attended.then(|| {
        let half = (f / 2).max(1);
        let responses = units.len(); // interior units + 1 for the entry output
        AttentionParams {
            squeeze_w: store.insert(
                format!("{name}.attn.squeeze.weight"),
                he_init(rng, (half, f, 3, 3)),
                true,
            ),
            squeeze_b: store.insert(
                format!("{name}.attn.squeeze.bias"),
                Array4::zeros((1, half, 1, 1)),
                true,
            ),
            squeeze_alpha: store.insert(
                format!("{name}.attn.squeeze.alpha"),
                Array4::from_elem((1, half, 1, 1), T::from_f64(0.25)),
                true,
            ),
            mix_w: store.insert(
                format!("{name}.attn.mix.weight"),
                he_init(rng, (responses, half, 1, 1)),
                true,
            ),
            mix_b: store.insert(
                format!("{name}.attn.mix.bias"),
                Array4::zeros((1, responses, 1, 1)),
                true,
            ),
        }
    });
    BlockParams { name: name.to_string(), kind, units, attention }
}

/// Per-graph binding of parameter tensors to leaf nodes.
pub struct Bound {
    nodes: Vec<Option<NodeId>>,
}

impl Bound {
    /// Leafs every trainable parameter into the graph. Running statistics
    /// stay in the store; batch norm reads them as constants.
    pub fn bind<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>) -> Bound {
        let mut nodes = Vec::with_capacity(store.len());
        for (_, e) in store.iter() {
            if e.trainable {
                nodes.push(Some(g.leaf(e.value.clone(), true)));
            } else {
                nodes.push(None);
            }
        }
        Bound { nodes }
    }

    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id].expect("parameter was bound")
    }
}

fn running_vec<T: Real>(store: &ParamStore<T>, id: ParamId) -> Array1<T> {
    store.get(id).slice(s![0, .., 0, 0]).to_owned()
}

fn update_running<T: Real>(store: &mut ParamStore<T>, bn: &BnParams, stats: &BnBatchStats<T>) {
    let mom = T::from_f64(BN_MOMENTUM);
    let one_m = T::one() - mom;
    let rm = store.get_mut(bn.running_mean);
    for (r, &b) in rm.iter_mut().zip(stats.mean.iter()) {
        *r = one_m * *r + mom * b;
    }
    let rv = store.get_mut(bn.running_var);
    for (r, &b) in rv.iter_mut().zip(stats.var.iter()) {
        *r = one_m * *r + mom * b;
    }
}

fn apply_bn<T: Real>(
    g: &mut Graph<T>,
    bound: &Bound,
    store: &mut ParamStore<T>,
    bn: &BnParams,
    x: NodeId,
    mode: BnMode,
) -> Result<NodeId, GraphError> {
    let (id, stats) = match mode {
        BnMode::Train => g.batch_norm(x, bound.node(bn.gamma), bound.node(bn.beta), mode, None)?,
        BnMode::Eval => {
            let rm = running_vec(store, bn.running_mean);
            let rv = running_vec(store, bn.running_var);
            g.batch_norm(x, bound.node(bn.gamma), bound.node(bn.beta), mode, Some((&rm, &rv)))?
        }
    };
    if let Some(stats) = stats {
        update_running(store, bn, &stats);
    }
    Ok(id)
}

fn unit_forward<T: Real>(
    g: &mut Graph<T>,
    bound: &Bound,
    store: &mut ParamStore<T>,
    unit: &UnitParams,
    x: NodeId,
    mode: BnMode,
) -> Result<NodeId, GraphError> {
    let activated = match &unit.act {
        ActParams::Prelu { alpha } => g.prelu(x, bound.node(*alpha))?,
        ActParams::EntryBn(bn) => apply_bn(g, bound, store, bn, x, mode)?,
    };
    let conv = g.conv2d(activated, bound.node(unit.conv_w), bound.node(unit.conv_b))?;
    apply_bn(g, bound, store, &unit.bn, conv, mode)
}

/// Runs one block. Plain blocks chain a running maximum over the unit
/// outputs; attended blocks weight each competing response by its softmax
/// attention map, with the final unit output scaled rather than maxed.
pub fn block_forward<T: Real>(
    g: &mut Graph<T>,
    bound: &Bound,
    store: &mut ParamStore<T>,
    bp: &BlockParams,
    x: NodeId,
    mode: BnMode,
) -> Result<NodeId, GraphError> {
    let entry = unit_forward(g, bound, store, &bp.units[0], x, mode)?;
    match &bp.attention {
        None => {
            let mut running = entry;
            for unit in &bp.units[1..] {
                let h = unit_forward(g, bound, store, unit, running, mode)?;
                running = g.maxout(&[running, h])?;
            }
            Ok(running)
        }
        Some(attn) => {
            let lam = attention_maps(g, bound, attn, entry)?;
            let interior = &bp.units[1..];
            let n = interior.len();
            debug_assert!(n >= 2, "attention block needs at least two interior units");
            let lam_at = |g: &mut Graph<T>, k: usize| g.slice_channels(lam, k, k + 1);
            // c1 = max(lam1 * H1(entry), lam0 * entry)
            let h1 = unit_forward(g, bound, store, &interior[0], entry, mode)?;
            let l1 = lam_at(g, 1)?;
            let wh1 = g.mul_channel_scalar(h1, l1)?;
            let l0 = lam_at(g, 0)?;
            let wx = g.mul_channel_scalar(entry, l0)?;
            let mut c = g.maxout(&[wh1, wx])?;
            // c_k = max(lam_k * H_k(c_{k-1}), c_{k-1})
            for (k, unit) in interior.iter().enumerate().take(n - 1).skip(1) {
                let h = unit_forward(g, bound, store, unit, c, mode)?;
                let lk = lam_at(g, k + 1)?;
                let wh = g.mul_channel_scalar(h, lk)?;
                c = g.maxout(&[wh, c])?;
            }
            // Output: lam_n * H_n(c_{n-1}) without further competition.
            let hn = unit_forward(g, bound, store, &interior[n - 1], c, mode)?;
            let ln = lam_at(g, n)?;
            g.mul_channel_scalar(hn, ln)
        }
    }
}

/// Attention coefficients: squeeze conv, PReLU, 1x1 mix conv, channel
/// softmax. One map per competing response; maps sum to 1 at every pixel.
fn attention_maps<T: Real>(
    g: &mut Graph<T>,
    bound: &Bound,
    attn: &AttentionParams,
    x: NodeId,
) -> Result<NodeId, GraphError> {
    let sq = g.conv2d(x, bound.node(attn.squeeze_w), bound.node(attn.squeeze_b))?;
    let act = g.prelu(sq, bound.node(attn.squeeze_alpha))?;
    let mix = g.conv2d(act, bound.node(attn.mix_w), bound.node(attn.mix_b))?;
    g.softmax_channels(mix)
}
