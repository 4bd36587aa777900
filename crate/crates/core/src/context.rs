//! Queries attending to the encoded scene: map, then agents, then history.
//!
//! Shared by the target generator and the trajectory decoder, which each own
//! an instance. Map and agent memories carry their history-interaction
//! features added in; the history block adds a learned per-head multiple of
//! the current step's temporal attention row as a logit bias.

use tsd_autograd::{Graph, Shape, Var};

use crate::encoder::SceneVars;
use crate::nn::{Bound, CrossBlock, Init, KeyValue, ParamId};

#[derive(Clone, Debug)]
pub struct SceneAttention {
    pub map: CrossBlock,
    pub agents: CrossBlock,
    pub history: CrossBlock,
    /// `[1, 1, H]` weight of the temporal attention bias per head.
    pub temporal_weight: ParamId,
    pub heads: usize,
}

/// Projected memories, computed once and reused across decoding cycles.
pub struct SceneMemory {
    map: KeyValue,
    agents: KeyValue,
    history: KeyValue,
    history_bias: Vec<Var>,
}

impl SceneAttention {
    pub fn new(init: &mut Init, name: &str, d: usize, heads: usize) -> Self {
        Self {
            map: CrossBlock::new(init, &format!("{name}.map"), d, heads),
            agents: CrossBlock::new(init, &format!("{name}.agents"), d, heads),
            history: CrossBlock::new(init, &format!("{name}.history"), d, heads),
            temporal_weight: init.uniform(
                &format!("{name}.temporal_weight"),
                Shape::new(1, 1, heads),
                heads,
            ),
            heads,
        }
    }

    pub fn memory(&self, g: &mut Graph, p: &Bound, scene: &SceneVars) -> SceneMemory {
        let map_mem = g.add(scene.f_m, scene.f_xm);
        let agent_mem = g.add(scene.f_a, scene.f_xa);
        let t = g.shape(scene.f_temporal).rows;
        let current = g.slice_rows(scene.f_temporal, t - 1, 1);
        let w = p.var(self.temporal_weight);
        let history_bias = (0..self.heads)
            .map(|h| {
                let wh = g.slice_cols(w, h, 1);
                let b = g.mul(current, wh);
                g.add(b, scene.focal_key_bias)
            })
            .collect();
        SceneMemory {
            map: self.map.memory(g, p, map_mem),
            agents: self.agents.memory(g, p, agent_mem),
            history: self.history.memory(g, p, scene.f_x),
            history_bias,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, mem: &SceneMemory) -> Var {
        let x = self.map.forward(g, p, x, &mem.map, &[]).out;
        let x = self.agents.forward(g, p, x, &mem.agents, &[]).out;
        self.history
            .forward(g, p, x, &mem.history, &mem.history_bias)
            .out
    }
}
