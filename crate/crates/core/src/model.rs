//! The assembled network: parameter layout, initialisation and forward pass.

use rand::Rng;
use sfad_tensor::{normal, uniform_fan_in, Bound, Element, ParamId, ParamStore, Tape, Tensor, Var};

use crate::config::{GraphGenConfig, GraphMode, ModelConfig};
use crate::data::Normalizer;
use crate::decouple::{decouple, GateVars, PatternFlows};
use crate::error::{Error, Result, StageExt};
use crate::graph::{directed_graph, fuse_graphs, temporal_features, FusionVars, Fused, TimeFeatures};
use crate::network::{
    gru_forward, input_project, normalized_operator, regression_head, rgc_propagate, GruVars,
    HeadVars,
};

/// Standard deviation of embedding and time-pool initialisation.
pub const EMBEDDING_STD: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Uniform,
    Normal(f64),
    Zeros,
}

/// Name, shape and initialiser of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Adjacency produced for one pattern.
#[derive(Clone, Copy, Debug)]
pub struct PatternGraph {
    pub spatial: Option<Var>,
    pub temporal: Option<Var>,
    pub fused: Option<Fused>,
    /// The graph the pattern's convolutions use, `[N, N]` or `[B, N, N]`.
    pub adjacency: Var,
}

/// Tape handles to everything a forward pass produced.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[B, Tf, N, C]` in raw flow units.
    pub prediction: Var,
    /// `[B, Tf, N, C]` before denormalisation.
    pub normalized: Var,
    pub time: TimeFeatures,
    pub graphs: Vec<PatternGraph>,
    /// Node-major `[B, N, Th, C]` pattern streams.
    pub flows: PatternFlows,
    /// `[B, N, Th, G·M·d]`
    pub x_out: Var,
    /// `[B, N, Th, M·d]`
    pub h_out: Var,
}

/// Network hyperparameters together with the data facts they depend on.
#[derive(Clone, Debug)]
pub struct Sfadnet {
    pub model: ModelConfig,
    pub graph: GraphGenConfig,
    pub nodes: usize,
    pub steps_per_day: usize,
    pub normalizer: Normalizer,
    predefined: Option<Tensor<f64>>,
    head_dim: usize,
    specs: Vec<ParamSpec>,
}

impl Sfadnet {
    pub fn new(
        model: ModelConfig,
        graph: GraphGenConfig,
        nodes: usize,
        steps_per_day: usize,
        normalizer: Normalizer,
        predefined: Option<Tensor<f64>>,
    ) -> Result<Self> {
        let mode = graph.mode;
        if nodes == 0 || steps_per_day == 0 {
            return Err(Error::config("model needs at least one node and one step per day"));
        }
        if normalizer.channels() != model.channels {
            return Err(Error::config(format!(
                "normalizer has {} channels, model expects {}",
                normalizer.channels(),
                model.channels
            )));
        }
        if matches!(mode, GraphMode::Fused | GraphMode::SpatialOnly) && graph.k_spatial > nodes {
            return Err(Error::config(format!(
                "graph.k_spatial: {} exceeds node count {nodes}",
                graph.k_spatial
            )));
        }
        if matches!(mode, GraphMode::Fused | GraphMode::TemporalOnly) && graph.k_temporal > nodes {
            return Err(Error::config(format!(
                "graph.k_temporal: {} exceeds node count {nodes}",
                graph.k_temporal
            )));
        }
        match (&predefined, mode) {
            (None, GraphMode::Predefined) => {
                return Err(Error::config("data.graph: graph.mode = predefined needs a graph"))
            }
            (Some(a), GraphMode::Predefined) if a.shape() != [nodes, nodes] => {
                return Err(Error::config(format!(
                    "predefined graph is {:?}, expected [{nodes}, {nodes}]",
                    a.shape()
                )))
            }
            _ => {}
        }
        let predefined = predefined.filter(|_| mode == GraphMode::Predefined);
        let head_dim = graph.resolved_head_dim(nodes);
        let mut net = Self {
            model,
            graph,
            nodes,
            steps_per_day,
            normalizer,
            predefined,
            head_dim,
            specs: Vec::new(),
        };
        net.specs = net.build_specs();
        Ok(net)
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn param_count(&self) -> usize {
        self.specs.iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }

    /// Channel width of the skip-concatenated head input.
    pub fn head_input_width(&self) -> usize {
        let m = &self.model;
        let rgc = m.rgc_blocks * m.hidden;
        rgc + m.patterns * rgc + m.channels + 2 * m.time_dim
    }

    fn build_specs(&self) -> Vec<ParamSpec> {
        let m = &self.model;
        let (n, nd, dd) = (self.nodes, m.node_dim, m.time_dim);
        let mode = self.graph.mode;
        let mut specs = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, init: Init| {
            specs.push(ParamSpec { name, shape, init });
        };
        add("time_pool.daily".into(), vec![self.steps_per_day, n, dd], Init::Normal(EMBEDDING_STD));
        add("time_pool.weekly".into(), vec![7, n, dd], Init::Normal(EMBEDDING_STD));
        if m.patterns > 1 {
            add("decouple.node_emb".into(), vec![n, nd], Init::Normal(EMBEDDING_STD));
            for g in 0..m.patterns - 1 {
                add(format!("decouple.{g}.w1"), vec![2 * dd + nd, m.gate_hidden], Init::Uniform);
                add(format!("decouple.{g}.w2"), vec![m.gate_hidden, 1], Init::Uniform);
            }
        }
        let spatial = matches!(mode, GraphMode::Fused | GraphMode::SpatialOnly);
        let temporal = matches!(mode, GraphMode::Fused | GraphMode::TemporalOnly);
        let (s, dh) = (self.graph.heads, self.head_dim);
        for g in 0..m.patterns {
            if spatial {
                let p = format!("pattern{g}.spatial_emb");
                add(format!("{p}.e1"), vec![n, nd], Init::Normal(EMBEDDING_STD));
                add(format!("{p}.e2"), vec![n, nd], Init::Normal(EMBEDDING_STD));
                add(format!("{p}.w1"), vec![nd, nd], Init::Uniform);
                add(format!("{p}.w2"), vec![nd, nd], Init::Uniform);
            }
            if temporal {
                add(format!("pattern{g}.fusion.temporal_w1"), vec![dd, dd], Init::Uniform);
                add(format!("pattern{g}.fusion.temporal_w2"), vec![dd, dd], Init::Uniform);
            }
            if mode == GraphMode::Fused {
                for w in ["wq", "wk", "wv"] {
                    add(format!("pattern{g}.fusion.{w}"), vec![s, n, dh], Init::Uniform);
                }
                add(format!("pattern{g}.fusion.wo"), vec![s * dh, n], Init::Uniform);
            }
            add(format!("pattern{g}.project.w"), vec![m.channels, m.hidden], Init::Uniform);
            for b in 0..m.rgc_blocks {
                add(format!("pattern{g}.rgc{b}.w"), vec![m.depth * m.hidden, m.hidden], Init::Uniform);
            }
        }
        let h = m.rgc_blocks * m.hidden;
        let d_in = m.patterns * h;
        for gate in ["z", "r", "h"] {
            add(format!("gru.w_{gate}"), vec![d_in, h], Init::Uniform);
        }
        for gate in ["z", "r", "h"] {
            add(format!("gru.u_{gate}"), vec![h, h], Init::Uniform);
        }
        for gate in ["z", "r", "h"] {
            add(format!("gru.b_{gate}"), vec![h], Init::Zeros);
        }
        let hh = m.head_hidden;
        add("head.w1".into(), vec![self.head_input_width(), hh], Init::Uniform);
        add("head.b1".into(), vec![hh], Init::Zeros);
        add("head.w2".into(), vec![hh, hh], Init::Uniform);
        add("head.b2".into(), vec![hh], Init::Zeros);
        add("head.conv_w".into(), vec![m.history * hh, m.horizon * m.channels], Init::Uniform);
        add("head.conv_b".into(), vec![m.horizon * m.channels], Init::Zeros);
        specs
    }

    /// Fresh parameters in layout order. Values are drawn in 64-bit and
    /// rounded, so `init::<f32>` equals `init::<f64>` cast to 32-bit.
    pub fn init_params<T: Element>(&self, rng: &mut impl Rng) -> ParamStore<T> {
        let mut store = ParamStore::new();
        for spec in &self.specs {
            let t: Tensor<f64> = match spec.init {
                Init::Uniform => uniform_fan_in(&spec.shape, rng),
                Init::Normal(std) => normal(&spec.shape, std, rng),
                Init::Zeros => Tensor::zeros(spec.shape.clone()),
            };
            store.insert(spec.name.clone(), t.cast()).expect("parameter names are unique");
        }
        store
    }

    /// Checks that `store` holds exactly this layout.
    pub fn check_params<T: Element>(&self, store: &ParamStore<T>) -> Result<()> {
        if store.len() != self.specs.len() {
            return Err(Error::config(format!(
                "parameter set has {} tensors, model expects {}",
                store.len(),
                self.specs.len()
            )));
        }
        for (spec, (name, t)) in self.specs.iter().zip(store.iter()) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::config(format!(
                    "parameter `{name}` {:?} does not match expected `{}` {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    /// Runs the network on a normalised batch `x` `[B, Th, N, C]` with
    /// `[B·Th]` time indices.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Element>(
        &self,
        tape: &Tape<T>,
        params: &ParamStore<T>,
        bound: &Bound,
        x: Var,
        tod: &[usize],
        dow: &[usize],
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<Forward> {
        let v = Lookup { params, bound };
        let m = &self.model;
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1] != m.history || shape[2] != self.nodes || shape[3] != m.channels {
            return Err(Error::config(format!(
                "input batch {shape:?} does not match [B, {}, {}, {}]",
                m.history, self.nodes, m.channels
            )));
        }
        let (b, th, n) = (shape[0], m.history, self.nodes);
        let xs = tape.permute(x, &[0, 2, 1, 3]).stage("input")?;

        let time = temporal_features(tape, v.get("time_pool.daily")?, v.get("time_pool.weekly")?, tod, dow, th)
            .stage("time lookup")?;
        let daily = tape.permute(time.daily, &[0, 2, 1, 3]).stage("time lookup")?;
        let weekly = tape.permute(time.weekly, &[0, 2, 1, 3]).stage("time lookup")?;

        let graphs = (0..m.patterns)
            .map(|g| self.pattern_graph(tape, &v, &time, g))
            .collect::<Result<Vec<_>>>()
            .stage("graph generation")?;

        let flows = {
            let gates = (0..m.patterns.saturating_sub(1))
                .map(|g| {
                    Ok(GateVars {
                        w1: v.get(&format!("decouple.{g}.w1"))?,
                        w2: v.get(&format!("decouple.{g}.w2"))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let emb = if gates.is_empty() {
                None
            } else {
                let e = tape.reshape(v.get("decouple.node_emb")?, &[1, n, 1, m.node_dim])?;
                Some(tape.broadcast_to(e, &[b, n, th, m.node_dim])?)
            };
            decouple(tape, xs, daily, weekly, emb, &gates).stage("decouple")?
        };

        let mut blocks = Vec::with_capacity(m.patterns * m.rgc_blocks);
        for (g, (flow, graph)) in flows.flows.iter().zip(&graphs).enumerate() {
            let lifted = input_project(tape, *flow, v.get(&format!("pattern{g}.project.w"))?)
                .stage("projection")?;
            let op = normalized_operator(tape, graph.adjacency).stage("graph convolution")?;
            for blk in 0..m.rgc_blocks {
                let w = v.get(&format!("pattern{g}.rgc{blk}.w"))?;
                blocks.push(
                    rgc_propagate(tape, lifted, op, m.gamma, m.depth, w).stage("graph convolution")?,
                );
            }
        }
        let x_out = tape.concat(&blocks, -1).stage("graph convolution")?;

        let gru = GruVars {
            w_z: v.get("gru.w_z")?,
            w_r: v.get("gru.w_r")?,
            w_h: v.get("gru.w_h")?,
            u_z: v.get("gru.u_z")?,
            u_r: v.get("gru.u_r")?,
            u_h: v.get("gru.u_h")?,
            b_z: v.get("gru.b_z")?,
            b_r: v.get("gru.b_r")?,
            b_h: v.get("gru.b_h")?,
        };
        let h_out = gru_forward(tape, x_out, &gru, m.dropout, training, rng).stage("recurrence")?;

        let head = HeadVars {
            w1: v.get("head.w1")?,
            b1: v.get("head.b1")?,
            w2: v.get("head.w2")?,
            b2: v.get("head.b2")?,
            conv_w: v.get("head.conv_w")?,
            conv_b: v.get("head.conv_b")?,
        };
        let normalized =
            regression_head(tape, h_out, x_out, xs, daily, weekly, &head, m.horizon, m.channels)
                .stage("regression head")?;
        let prediction = self.denormalize(tape, normalized)?;
        Ok(Forward { prediction, normalized, time, graphs, flows, x_out, h_out })
    }

    fn denormalize<T: Element>(&self, tape: &Tape<T>, z: Var) -> Result<Var> {
        let nm = &self.normalizer;
        if nm.channels() == 1 {
            return Ok(tape.shift(tape.scale(z, T::of(nm.std[0])), T::of(nm.mean[0])));
        }
        let std = tape.constant(Tensor::from_f64(vec![nm.channels()], &nm.std)?);
        let mean = tape.constant(Tensor::from_f64(vec![nm.channels()], &nm.mean)?);
        Ok(tape.add(tape.mul(z, std)?, mean)?)
    }

    fn pattern_graph<T: Element>(
        &self,
        tape: &Tape<T>,
        v: &Lookup<'_, T>,
        time: &TimeFeatures,
        g: usize,
    ) -> Result<PatternGraph> {
        let cfg = &self.graph;
        let spatial = |tape: &Tape<T>| -> Result<Var> {
            let p = format!("pattern{g}.spatial_emb");
            directed_graph(
                tape,
                v.get(&format!("{p}.e1"))?,
                v.get(&format!("{p}.e2"))?,
                v.get(&format!("{p}.w1"))?,
                v.get(&format!("{p}.w2"))?,
                cfg.alpha,
                cfg.k_spatial,
            )
        };
        let temporal = |tape: &Tape<T>| -> Result<Var> {
            directed_graph(
                tape,
                time.daily_mean,
                time.weekly_mean,
                v.get(&format!("pattern{g}.fusion.temporal_w1"))?,
                v.get(&format!("pattern{g}.fusion.temporal_w2"))?,
                cfg.alpha,
                cfg.k_temporal,
            )
        };
        Ok(match cfg.mode {
            GraphMode::Fused => {
                let a_s = spatial(tape)?;
                let a_t = temporal(tape)?;
                let w = FusionVars {
                    wq: v.get(&format!("pattern{g}.fusion.wq"))?,
                    wk: v.get(&format!("pattern{g}.fusion.wk"))?,
                    wv: v.get(&format!("pattern{g}.fusion.wv"))?,
                    wo: v.get(&format!("pattern{g}.fusion.wo"))?,
                };
                let fused = fuse_graphs(tape, a_s, a_t, cfg.beta, w)?;
                PatternGraph {
                    spatial: Some(a_s),
                    temporal: Some(a_t),
                    fused: Some(fused),
                    adjacency: fused.adjacency,
                }
            }
            GraphMode::SpatialOnly => {
                let a_s = spatial(tape)?;
                PatternGraph { spatial: Some(a_s), temporal: None, fused: None, adjacency: a_s }
            }
            GraphMode::TemporalOnly => {
                let a_t = temporal(tape)?;
                PatternGraph { spatial: None, temporal: Some(a_t), fused: None, adjacency: a_t }
            }
            GraphMode::Predefined => {
                let a = self.predefined.as_ref().expect("checked at construction");
                let a = tape.constant(a.cast());
                PatternGraph { spatial: None, temporal: None, fused: None, adjacency: a }
            }
        })
    }
}

struct Lookup<'a, T> {
    params: &'a ParamStore<T>,
    bound: &'a Bound,
}

impl<T: Element> Lookup<'_, T> {
    fn get(&self, name: &str) -> Result<Var> {
        let id: ParamId = self
            .params
            .id(name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))?;
        Ok(self.bound.var(id))
    }
}
