//! The HIAM forecaster: OD and DO branches of stacked GCGRUs coupled by an
//! interaction block, run as an `n`-step encoder and an `m`-step decoder.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::{Ctx, Dense, Dit, Gcgru, OutputHead, ParameterSet, SingleStation, Tape, Var};
use crate::topology::MetroGraph;

/// How the OD and DO branches exchange information after each GCGRU level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionMode {
    None,
    SingleStation,
    Dit,
}

impl InteractionMode {
    pub const ALL: [InteractionMode; 3] = [Self::None, Self::SingleStation, Self::Dit];

    pub fn label(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::SingleStation => "single_station",
            Self::Dit => "dit",
        }
    }
}

/// Which unfinished-order features feed the OD branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputVariant {
    Iod,
    IodU,
    IodUShort,
    IodULong,
    Full,
}

impl InputVariant {
    /// Ablation column order.
    pub const ALL: [InputVariant; 5] = [Self::Iod, Self::IodU, Self::IodUShort, Self::IodULong, Self::Full];

    pub fn label(self) -> &'static str {
        match self {
            Self::Iod => "IOD",
            Self::IodU => "IOD+U",
            Self::IodUShort => "IOD+U(short)",
            Self::IodULong => "IOD+U(long)",
            Self::Full => "IOD+U(short+long)",
        }
    }

    /// `(use_uod_long, use_uod_short, use_raw_u)`.
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Self::Iod => (false, false, false),
            Self::IodU => (false, false, true),
            Self::IodUShort => (false, true, false),
            Self::IodULong => (true, false, false),
            Self::Full => (true, true, false),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub stations: usize,
    pub k: usize,
    pub d: usize,
    pub heads: usize,
    pub n: usize,
    pub m: usize,
    pub use_uod_long: bool,
    pub use_uod_short: bool,
    /// Feed the raw unfinished-order vector through its own GCGRU.
    #[serde(default)]
    pub use_raw_u: bool,
    pub interaction: InteractionMode,
    #[serde(default = "default_true")]
    pub scale_attention: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn with_variant(mut self, variant: InputVariant) -> Self {
        (self.use_uod_long, self.use_uod_short, self.use_raw_u) = variant.flags();
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("stations", self.stations),
            ("k", self.k),
            ("d", self.d),
            ("heads", self.heads),
            ("n", self.n),
            ("m", self.m),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "feature dimension {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.k > self.stations {
            return Err(Error::Config(format!("k = {} exceeds {} stations", self.k, self.stations)));
        }
        Ok(())
    }
}

/// One normalized encoder input step.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub iod: Array2<f64>,
    /// Unfinished orders as an `N x 1` column.
    pub u: Array2<f64>,
    pub uod_long: Array2<f64>,
    pub uod_short: Array2<f64>,
    pub do_: Array2<f64>,
}

/// Normalized predictions, one `N x K` matrix per horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub od: Vec<Array2<f64>>,
    pub do_: Vec<Array2<f64>>,
}

#[derive(Debug, Clone)]
enum Interaction {
    None,
    SingleStation(SingleStation),
    Dit(Dit),
}

impl Interaction {
    fn new(
        cfg: &ModelConfig,
        ps: &mut ParameterSet,
        rng: &mut ChaCha8Rng,
        name: &str,
    ) -> Result<Self> {
        Ok(match cfg.interaction {
            InteractionMode::None => Self::None,
            InteractionMode::SingleStation => Self::SingleStation(SingleStation::new(ps, rng, name, cfg.d)),
            InteractionMode::Dit => Self::Dit(Dit::new(ps, rng, name, cfg.d, cfg.heads, cfg.scale_attention)?),
        })
    }

    fn apply(&self, cx: &mut Ctx<'_>, od: Var, do_: Var) -> (Var, Var) {
        match self {
            Self::None => (od, do_),
            Self::SingleStation(layer) => layer.forward(cx, od, do_),
            Self::Dit(dit) => {
                let out = dit.forward(cx, od, do_);
                (out.od, out.do_)
            }
        }
    }
}

#[derive(Debug, Clone)]
struct EncoderCell {
    iod: Gcgru,
    long: Option<Gcgru>,
    short: Option<Gcgru>,
    raw_u: Option<Gcgru>,
    fusion: Option<Dense>,
    do1: Gcgru,
    interaction1: Interaction,
    od2: Gcgru,
    do2: Gcgru,
    interaction2: Interaction,
}

#[derive(Debug, Clone)]
struct DecoderCell {
    od1: Gcgru,
    do1: Gcgru,
    interaction1: Interaction,
    od2: Gcgru,
    do2: Gcgru,
    interaction2: Interaction,
    head_od: OutputHead,
    head_do: OutputHead,
}

/// Encoder hidden states as tape handles. `od2`/`do2` hold the
/// interaction-enhanced states, which are what the next step recurs on.
#[derive(Debug, Clone, Copy)]
pub struct EncoderState {
    pub long: Var,
    pub short: Var,
    pub raw_u: Var,
    pub iod: Var,
    pub do1: Var,
    pub od2: Var,
    pub do2: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub od1: Var,
    pub do1: Var,
    pub od2: Var,
    pub do2: Var,
}

#[derive(Debug, Clone)]
pub struct Hiam {
    config: ModelConfig,
    params: ParameterSet,
    encoder: EncoderCell,
    decoder: DecoderCell,
}

impl Hiam {
    /// Builds the model with Xavier-uniform weights and zero biases drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut ps = ParameterSet::new();
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let (d, k) = (config.d, config.k);
        let aux = [config.use_uod_long, config.use_uod_short, config.use_raw_u].iter().filter(|&&b| b).count();
        let encoder = EncoderCell {
            iod: Gcgru::new(&mut ps, rng, "encoder.iod", k, d),
            long: config.use_uod_long.then(|| Gcgru::new(&mut ps, rng, "encoder.long", k, d)),
            short: config.use_uod_short.then(|| Gcgru::new(&mut ps, rng, "encoder.short", k, d)),
            raw_u: config.use_raw_u.then(|| Gcgru::new(&mut ps, rng, "encoder.raw_u", 1, d)),
            fusion: (aux > 0).then(|| Dense::new(&mut ps, rng, "encoder.fusion", aux * d, d, true)),
            do1: Gcgru::new(&mut ps, rng, "encoder.do1", k, d),
            interaction1: Interaction::new(&config, &mut ps, rng, "encoder.interaction1")?,
            od2: Gcgru::new(&mut ps, rng, "encoder.od2", d, d),
            do2: Gcgru::new(&mut ps, rng, "encoder.do2", d, d),
            interaction2: Interaction::new(&config, &mut ps, rng, "encoder.interaction2")?,
        };
        let decoder = DecoderCell {
            od1: Gcgru::new(&mut ps, rng, "decoder.od1", k, d),
            do1: Gcgru::new(&mut ps, rng, "decoder.do1", k, d),
            interaction1: Interaction::new(&config, &mut ps, rng, "decoder.interaction1")?,
            od2: Gcgru::new(&mut ps, rng, "decoder.od2", d, d),
            do2: Gcgru::new(&mut ps, rng, "decoder.do2", d, d),
            interaction2: Interaction::new(&config, &mut ps, rng, "decoder.interaction2")?,
            head_od: OutputHead::new(&mut ps, rng, "head.od", d, k),
            head_do: OutputHead::new(&mut ps, rng, "head.do", d, k),
        };
        Ok(Self { config, params: ps, encoder, decoder })
    }

    /// Rebuilds the model around stored parameters (e.g. from a checkpoint).
    pub fn with_params(config: ModelConfig, params: ParameterSet) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (name, value) in params.iter() {
            if model.params.id(name).is_none() {
                return Err(Error::Checkpoint(format!("unknown parameter `{name}`")));
            }
            model.params.set(name, value.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn session<'m>(&'m self, graph: &MetroGraph) -> Result<Session<'m>> {
        if graph.station_count() != self.config.stations {
            return Err(Error::Dimension(format!(
                "model expects {} stations, graph has {}",
                self.config.stations,
                graph.station_count()
            )));
        }
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape);
        let adjacency = tape.constant(graph.weights().clone());
        Ok(Session { model: self, tape, params, adjacency, encoder: None, decoder: None })
    }

    /// Runs the encoder over `inputs` and decodes `m` horizons.
    pub fn forward(&self, graph: &MetroGraph, inputs: &[EncoderInput]) -> Result<Forecast> {
        let mut session = self.session(graph)?;
        let (od, do_) = session.run(inputs)?;
        let value = |v: &Var| session.tape.value(*v).clone();
        Ok(Forecast { od: od.iter().map(value).collect(), do_: do_.iter().map(value).collect() })
    }
}

/// A forward pass in progress, recorded on its own tape.
pub struct Session<'m> {
    model: &'m Hiam,
    pub tape: Tape,
    params: Vec<Var>,
    adjacency: Var,
    encoder: Option<EncoderState>,
    decoder: Option<DecoderState>,
}

impl Session<'_> {
    /// Tape handles of the parameters, in `ParameterSet` order.
    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    pub fn encoder_state(&self) -> Option<&EncoderState> {
        self.encoder.as_ref()
    }

    fn zeros(&mut self, cols: usize) -> Var {
        self.tape.constant(Array2::zeros((self.model.config.stations, cols)))
    }

    fn check(&self, what: &str, a: &Array2<f64>, cols: usize) -> Result<()> {
        let n = self.model.config.stations;
        if a.dim() != (n, cols) {
            return Err(Error::Dimension(format!("{what} is {:?}, expected ({n}, {cols})", a.dim())));
        }
        Ok(())
    }

    pub fn encoder_step(&mut self, input: &EncoderInput) -> Result<()> {
        let cfg = &self.model.config;
        let k = cfg.k;
        self.check("IOD input", &input.iod, k)?;
        self.check("DO input", &input.do_, k)?;
        if cfg.use_uod_long {
            self.check("long-term UOD input", &input.uod_long, k)?;
        }
        if cfg.use_uod_short {
            self.check("short-term UOD input", &input.uod_short, k)?;
        }
        if cfg.use_raw_u {
            self.check("unfinished-order input", &input.u, 1)?;
        }
        let state = match self.encoder {
            Some(s) => s,
            None => {
                let z = self.zeros(cfg.d);
                EncoderState { long: z, short: z, raw_u: z, iod: z, do1: z, od2: z, do2: z }
            }
        };
        let cell = &self.model.encoder;
        let iod = self.tape.constant(input.iod.clone());
        let do_in = self.tape.constant(input.do_.clone());
        let long_in = cell.long.as_ref().map(|_| self.tape.constant(input.uod_long.clone()));
        let short_in = cell.short.as_ref().map(|_| self.tape.constant(input.uod_short.clone()));
        let u_in = cell.raw_u.as_ref().map(|_| self.tape.constant(input.u.clone()));

        let mut cx = Ctx { tape: &mut self.tape, params: &self.params, adjacency: self.adjacency };
        let mut next = state;
        let mut aux = Vec::new();
        if let (Some(g), Some(x)) = (&cell.long, long_in) {
            next.long = g.step(&mut cx, x, state.long);
            aux.push(next.long);
        }
        if let (Some(g), Some(x)) = (&cell.short, short_in) {
            next.short = g.step(&mut cx, x, state.short);
            aux.push(next.short);
        }
        if let (Some(g), Some(x)) = (&cell.raw_u, u_in) {
            next.raw_u = g.step(&mut cx, x, state.raw_u);
            aux.push(next.raw_u);
        }
        next.iod = cell.iod.step(&mut cx, iod, state.iod);
        let od1 = match &cell.fusion {
            Some(fusion) => {
                let joined = if aux.len() == 1 { aux[0] } else { cx.tape.concat_cols(&aux) };
                let fused = fusion.forward(&mut cx, joined);
                cx.tape.add(next.iod, fused)
            }
            None => next.iod,
        };
        next.do1 = cell.do1.step(&mut cx, do_in, state.do1);
        let (od1, do1) = cell.interaction1.apply(&mut cx, od1, next.do1);
        let od2 = cell.od2.step(&mut cx, od1, state.od2);
        let do2 = cell.do2.step(&mut cx, do1, state.do2);
        (next.od2, next.do2) = cell.interaction2.apply(&mut cx, od2, do2);
        self.encoder = Some(next);
        Ok(())
    }

    /// Seeds the decoder from the encoder's final states.
    ///
    /// The decoder's OD GCGRUs inherit the IOD and second-level OD states, the
    /// DO GCGRUs their encoder counterparts; the UOD states are dropped.
    pub fn handoff(&mut self) -> Result<()> {
        let enc = self.encoder.ok_or(Error::Uninitialized)?;
        self.decoder = Some(DecoderState { od1: enc.iod, do1: enc.do1, od2: enc.od2, do2: enc.do2 });
        Ok(())
    }

    /// One decoder iteration from the previous (normalized) predictions.
    pub fn decoder_step(&mut self, prev_od: Var, prev_do: Var) -> Result<(Var, Var)> {
        let state = self.decoder.ok_or(Error::Uninitialized)?;
        let k = self.model.config.k;
        for (what, v) in [("previous OD prediction", prev_od), ("previous DO prediction", prev_do)] {
            self.check(what, self.tape.value(v), k)?;
        }
        let cell = &self.model.decoder;
        let mut cx = Ctx { tape: &mut self.tape, params: &self.params, adjacency: self.adjacency };
        let od1 = cell.od1.step(&mut cx, prev_od, state.od1);
        let do1 = cell.do1.step(&mut cx, prev_do, state.do1);
        let (od1_hat, do1_hat) = cell.interaction1.apply(&mut cx, od1, do1);
        let od2 = cell.od2.step(&mut cx, od1_hat, state.od2);
        let do2 = cell.do2.step(&mut cx, do1_hat, state.do2);
        let (od2_hat, do2_hat) = cell.interaction2.apply(&mut cx, od2, do2);
        let od_pred = cell.head_od.forward(&mut cx, od2_hat);
        let do_pred = cell.head_do.forward(&mut cx, do2_hat);
        self.decoder = Some(DecoderState { od1, do1, od2: od2_hat, do2: do2_hat });
        Ok((od_pred, do_pred))
    }

    /// Full encoder/decoder pass; returns per-horizon prediction handles.
    pub fn run(&mut self, inputs: &[EncoderInput]) -> Result<(Vec<Var>, Vec<Var>)> {
        let cfg = &self.model.config;
        if inputs.len() != cfg.n {
            return Err(Error::Dimension(format!("expected {} input steps, got {}", cfg.n, inputs.len())));
        }
        let (k, m) = (cfg.k, cfg.m);
        for input in inputs {
            self.encoder_step(input)?;
        }
        self.handoff()?;
        let mut prev_od = self.zeros(k);
        let mut prev_do = prev_od;
        let mut od = Vec::with_capacity(m);
        let mut do_ = Vec::with_capacity(m);
        for _ in 0..m {
            (prev_od, prev_do) = self.decoder_step(prev_od, prev_do)?;
            od.push(prev_od);
            do_.push(prev_do);
        }
        Ok((od, do_))
    }
}

#[cfg(test)]
mod tests;
