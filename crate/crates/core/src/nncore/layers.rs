//! Graph convolution, GCGRU cells, the dual cross-attention block, and the
//! small dense pieces used around them.
//!
//! Node features are row-major: an `N x c` matrix holds one `c`-vector per
//! station, so a linear map is `X * Theta` with `Theta` of shape `c x d`.

use ndarray::Array2;
use rand::Rng;

use super::params::{Init, ParamId, ParameterSet};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::topology::MetroGraph;

/// Everything a layer needs while recording onto a tape.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub params: &'a [Var],
    /// Row-normalized adjacency `W` as a constant node.
    pub adjacency: Var,
}

impl Ctx<'_> {
    #[inline]
    pub fn p(&self, id: ParamId) -> Var {
        self.params[id.index()]
    }
}

/// `f(x_i) = x_i Θ_self + Σ_j W(i,j) x_j Θ_nbr (+ b)`.
#[derive(Debug, Clone)]
pub struct GraphConv {
    pub self_weight: ParamId,
    pub neighbor_weight: ParamId,
    pub bias: Option<ParamId>,
}

impl GraphConv {
    pub fn new(
        ps: &mut ParameterSet,
        rng: &mut impl Rng,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
    ) -> Self {
        Self {
            self_weight: ps.register(format!("{name}.self_weight"), (input, output), Init::XavierUniform, rng),
            neighbor_weight: ps.register(
                format!("{name}.neighbor_weight"),
                (input, output),
                Init::XavierUniform,
                rng,
            ),
            bias: bias.then(|| ps.register(format!("{name}.bias"), (1, output), Init::Zeros, rng)),
        }
    }

    /// `aggregated` must be `W * x`; callers share it between convolutions.
    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var, aggregated: Var) -> Var {
        let (ws, wn) = (cx.p(self.self_weight), cx.p(self.neighbor_weight));
        let own = cx.tape.matmul(x, ws);
        let nbr = cx.tape.matmul(aggregated, wn);
        let out = cx.tape.add(own, nbr);
        match self.bias {
            Some(b) => {
                let b = cx.p(b);
                cx.tape.add_row(out, b)
            }
            None => out,
        }
    }
}

/// Graph convolution on plain matrices (no bias).
pub fn graph_conv(
    x: &Array2<f64>,
    graph: &MetroGraph,
    theta_self: &Array2<f64>,
    theta_neighbor: &Array2<f64>,
) -> Result<Array2<f64>> {
    let n = graph.station_count();
    if x.nrows() != n {
        return Err(Error::Dimension(format!("features have {} rows for {n} stations", x.nrows())));
    }
    if theta_self.nrows() != x.ncols()
        || theta_neighbor.dim() != theta_self.dim()
    {
        return Err(Error::Dimension(format!(
            "features of width {} against weights {:?} / {:?}",
            x.ncols(),
            theta_self.dim(),
            theta_neighbor.dim()
        )));
    }
    Ok(x.dot(theta_self) + graph.weights().dot(x).dot(theta_neighbor))
}

/// GRU whose input/state maps are graph convolutions over `[x ‖ h]`.
#[derive(Debug, Clone)]
pub struct Gcgru {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub reset: GraphConv,
    pub update: GraphConv,
    pub candidate: GraphConv,
}

impl Gcgru {
    pub fn new(ps: &mut ParameterSet, rng: &mut impl Rng, name: &str, input: usize, hidden: usize) -> Self {
        let width = input + hidden;
        Self {
            input_dim: input,
            hidden_dim: hidden,
            reset: GraphConv::new(ps, rng, &format!("{name}.reset"), width, hidden, true),
            update: GraphConv::new(ps, rng, &format!("{name}.update"), width, hidden, true),
            candidate: GraphConv::new(ps, rng, &format!("{name}.candidate"), width, hidden, true),
        }
    }

    /// r = σ(GC_r[x‖h]), z = σ(GC_z[x‖h]), c = tanh(GC_c[x‖r⊙h]), h' = z⊙h + (1−z)⊙c.
    pub fn step(&self, cx: &mut Ctx<'_>, x: Var, h: Var) -> Var {
        let adj = cx.adjacency;
        let xh = cx.tape.concat_cols(&[x, h]);
        let agg = cx.tape.matmul(adj, xh);
        let r = self.reset.forward(cx, xh, agg);
        let r = cx.tape.sigmoid(r);
        let z = self.update.forward(cx, xh, agg);
        let z = cx.tape.sigmoid(z);
        let rh = cx.tape.mul(r, h);
        let xrh = cx.tape.concat_cols(&[x, rh]);
        let agg_r = cx.tape.matmul(adj, xrh);
        let c = self.candidate.forward(cx, xrh, agg_r);
        let c = cx.tape.tanh(c);
        let diff = cx.tape.sub(h, c);
        let carried = cx.tape.mul(z, diff);
        cx.tape.add(c, carried)
    }

    /// One step on plain matrices.
    pub fn evaluate(
        &self,
        params: &ParameterSet,
        graph: &MetroGraph,
        x: &Array2<f64>,
        h: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        let n = graph.station_count();
        if x.dim() != (n, self.input_dim) || h.dim() != (n, self.hidden_dim) {
            return Err(Error::Dimension(format!(
                "GCGRU expects {n}x{} input and {n}x{} state, got {:?} and {:?}",
                self.input_dim,
                self.hidden_dim,
                x.dim(),
                h.dim()
            )));
        }
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let adjacency = tape.constant(graph.weights().clone());
        let xv = tape.constant(x.clone());
        let hv = tape.constant(h.clone());
        let mut cx = Ctx { tape: &mut tape, params: &bound, adjacency };
        let out = self.step(&mut cx, xv, hv);
        Ok(tape.value(out).clone())
    }
}

/// Per-station affine map `X W (+ b)`; a 1x1 convolution over nodes.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Dense {
    pub fn new(
        ps: &mut ParameterSet,
        rng: &mut impl Rng,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
    ) -> Self {
        Self {
            weight: ps.register(format!("{name}.weight"), (input, output), Init::XavierUniform, rng),
            bias: bias.then(|| ps.register(format!("{name}.bias"), (1, output), Init::Zeros, rng)),
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Var {
        let w = cx.p(self.weight);
        let y = cx.tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = cx.p(b);
                cx.tape.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Query/key/value projections of one branch plus its output projection.
#[derive(Debug, Clone)]
pub struct BranchProjections {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
}

impl BranchProjections {
    fn new(ps: &mut ParameterSet, rng: &mut impl Rng, name: &str, d: usize) -> Self {
        let mut reg = |part: &str| ps.register(format!("{name}.{part}"), (d, d), Init::XavierUniform, rng);
        Self { query: reg("query"), key: reg("key"), value: reg("value"), output: reg("output") }
    }
}

/// Dual cross-attention between OD and DO hidden states.
///
/// For each head, OD rows attend over DO stations (`A_d2o`) and DO rows over
/// OD stations (`A_o2d`); softmax runs along each row so every target station
/// receives a convex combination of source values. Head contexts are
/// concatenated, projected, and added residually to their own branch.
#[derive(Debug, Clone)]
pub struct Dit {
    pub dim: usize,
    pub heads: usize,
    pub scaled: bool,
    pub od: BranchProjections,
    pub do_: BranchProjections,
}

/// Attention outputs of one DIT call (tape handles).
#[derive(Debug, Clone)]
pub struct DitVars {
    pub od: Var,
    pub do_: Var,
    pub attention_d2o: Vec<Var>,
    pub attention_o2d: Vec<Var>,
}

/// Attention outputs of one DIT call on plain matrices.
#[derive(Debug, Clone)]
pub struct DitOutput {
    pub od: Array2<f64>,
    pub do_: Array2<f64>,
    pub attention_d2o: Vec<Array2<f64>>,
    pub attention_o2d: Vec<Array2<f64>>,
}

impl Dit {
    pub fn new(
        ps: &mut ParameterSet,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
        scaled: bool,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("feature dimension {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            dim,
            heads,
            scaled,
            od: BranchProjections::new(ps, rng, &format!("{name}.od"), dim),
            do_: BranchProjections::new(ps, rng, &format!("{name}.do"), dim),
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, h_od: Var, h_do: Var) -> DitVars {
        let project = |cx: &mut Ctx<'_>, h: Var, id: ParamId| {
            let w = cx.p(id);
            cx.tape.matmul(h, w)
        };
        let q_od = project(cx, h_od, self.od.query);
        let k_od = project(cx, h_od, self.od.key);
        let v_od = project(cx, h_od, self.od.value);
        let q_do = project(cx, h_do, self.do_.query);
        let k_do = project(cx, h_do, self.do_.key);
        let v_do = project(cx, h_do, self.do_.value);

        let width = self.dim / self.heads;
        let scale = if self.scaled { 1.0 / (width as f64).sqrt() } else { 1.0 };
        let mut ctx_od = Vec::with_capacity(self.heads);
        let mut ctx_do = Vec::with_capacity(self.heads);
        let mut attention_d2o = Vec::with_capacity(self.heads);
        let mut attention_o2d = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let start = head * width;
            let slice = |cx: &mut Ctx<'_>, v: Var| {
                if self.heads == 1 {
                    v
                } else {
                    cx.tape.slice_cols(v, start, width)
                }
            };
            let (qo, ko, vo) = (slice(cx, q_od), slice(cx, k_od), slice(cx, v_od));
            let (qd, kd, vd) = (slice(cx, q_do), slice(cx, k_do), slice(cx, v_do));

            let logits = cx.tape.matmul_t(qo, kd);
            let logits = cx.tape.scale(logits, scale);
            let a_d2o = cx.tape.softmax_rows(logits);
            ctx_od.push(cx.tape.matmul(a_d2o, vd));
            attention_d2o.push(a_d2o);

            let logits = cx.tape.matmul_t(qd, ko);
            let logits = cx.tape.scale(logits, scale);
            let a_o2d = cx.tape.softmax_rows(logits);
            ctx_do.push(cx.tape.matmul(a_o2d, vo));
            attention_o2d.push(a_o2d);
        }
        let merge = |cx: &mut Ctx<'_>, parts: &[Var]| {
            if parts.len() == 1 {
                parts[0]
            } else {
                cx.tape.concat_cols(parts)
            }
        };
        let ctx_od = merge(cx, &ctx_od);
        let ctx_do = merge(cx, &ctx_do);
        let msg_od = project(cx, ctx_od, self.od.output);
        let msg_do = project(cx, ctx_do, self.do_.output);
        DitVars {
            od: cx.tape.add(h_od, msg_od),
            do_: cx.tape.add(h_do, msg_do),
            attention_d2o,
            attention_o2d,
        }
    }

    pub fn evaluate(&self, params: &ParameterSet, h_od: &Array2<f64>, h_do: &Array2<f64>) -> Result<DitOutput> {
        if h_od.dim() != h_do.dim() || h_od.ncols() != self.dim {
            return Err(Error::Dimension(format!(
                "DIT of width {} got {:?} and {:?}",
                self.dim,
                h_od.dim(),
                h_do.dim()
            )));
        }
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let adjacency = tape.constant(Array2::zeros((0, 0)));
        let od = tape.constant(h_od.clone());
        let do_ = tape.constant(h_do.clone());
        let mut cx = Ctx { tape: &mut tape, params: &bound, adjacency };
        let out = self.forward(&mut cx, od, do_);
        let value = |v: Var| tape.value(v).clone();
        Ok(DitOutput {
            od: value(out.od),
            do_: value(out.do_),
            attention_d2o: out.attention_d2o.iter().map(|&v| value(v)).collect(),
            attention_o2d: out.attention_o2d.iter().map(|&v| value(v)).collect(),
        })
    }
}

/// Same-station OD/DO exchange: each branch adds `[h_od ‖ h_do] W` of its own row.
#[derive(Debug, Clone)]
pub struct SingleStation {
    pub od: Dense,
    pub do_: Dense,
}

impl SingleStation {
    pub fn new(ps: &mut ParameterSet, rng: &mut impl Rng, name: &str, dim: usize) -> Self {
        Self {
            od: Dense::new(ps, rng, &format!("{name}.od"), 2 * dim, dim, false),
            do_: Dense::new(ps, rng, &format!("{name}.do"), 2 * dim, dim, false),
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, h_od: Var, h_do: Var) -> (Var, Var) {
        let both = cx.tape.concat_cols(&[h_od, h_do]);
        let msg_od = self.od.forward(cx, both);
        let msg_do = self.do_.forward(cx, both);
        (cx.tape.add(h_od, msg_od), cx.tape.add(h_do, msg_do))
    }
}

/// Shared-across-stations two-layer head: `d -> d` with PReLU, then `d -> K`.
#[derive(Debug, Clone)]
pub struct OutputHead {
    pub hidden: Dense,
    pub slope: ParamId,
    pub out: Dense,
}

impl OutputHead {
    pub fn new(ps: &mut ParameterSet, rng: &mut impl Rng, name: &str, dim: usize, k: usize) -> Self {
        Self {
            hidden: Dense::new(ps, rng, &format!("{name}.hidden"), dim, dim, true),
            slope: ps.register(format!("{name}.prelu"), (1, 1), Init::Constant(0.25), rng),
            out: Dense::new(ps, rng, &format!("{name}.out"), dim, k, true),
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, h: Var) -> Var {
        let hidden = self.hidden.forward(cx, h);
        let slope = cx.p(self.slope);
        let act = cx.tape.prelu(hidden, slope);
        self.out.forward(cx, act)
    }
}
