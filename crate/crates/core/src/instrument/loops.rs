use std::collections::BTreeSet;

use serde::Serialize;

use crate::isa::cfg::Cfg;
use crate::isa::{MethodDef, Pc};

use super::InstrumentError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct NaturalLoop {
    pub header: Pc,
    pub back_edge_src: Pc,
    pub body: BTreeSet<Pc>,
    pub innermost: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LoopAnalysis {
    pub edges: Vec<(Pc, Pc)>,
    /// `(src, header)` pairs, ordered by header then source.
    pub back_edges: Vec<(Pc, Pc)>,
    /// One natural loop per back edge, same order as `back_edges`.
    pub loops: Vec<NaturalLoop>,
}

impl LoopAnalysis {
    /// Distinct headers of innermost loops; each receives one checkpoint.
    pub fn innermost_headers(&self) -> BTreeSet<Pc> {
        self.loops
            .iter()
            .filter(|l| l.innermost)
            .map(|l| l.header)
            .collect()
    }
}

/// Finds back edges via dominators and marks innermost natural loops.
///
/// A loop is innermost when its body holds no header of a loop with a different header.
pub fn analyze_loops(m: &MethodDef) -> Result<LoopAnalysis, InstrumentError> {
    let cfg = Cfg::build(&m.code);
    let edges: Vec<(Pc, Pc)> = cfg
        .succs
        .iter()
        .enumerate()
        .flat_map(|(s, ts)| ts.iter().map(move |t| (s as Pc, *t)))
        .collect();

    for &(src, dst) in &cfg.retreating {
        if !cfg.dominates(dst, src) {
            return Err(InstrumentError::Irreducible {
                method: m.name.clone(),
                src,
                dst,
            });
        }
    }

    let mut back_edges: Vec<(Pc, Pc)> = edges
        .iter()
        .copied()
        .filter(|&(s, h)| cfg.reachable(s) && cfg.dominates(h, s))
        .collect();
    back_edges.sort_by_key(|&(s, h)| (h, s));

    let mut loops: Vec<NaturalLoop> = back_edges
        .iter()
        .map(|&(src, header)| NaturalLoop {
            header,
            back_edge_src: src,
            body: natural_body(&cfg, src, header),
            innermost: false,
        })
        .collect();

    let headers: BTreeSet<Pc> = loops.iter().map(|l| l.header).collect();
    for l in &mut loops {
        l.innermost = !headers
            .iter()
            .any(|h| *h != l.header && l.body.contains(h));
    }

    Ok(LoopAnalysis {
        edges,
        back_edges,
        loops,
    })
}

fn natural_body(cfg: &Cfg, src: Pc, header: Pc) -> BTreeSet<Pc> {
    let mut body = BTreeSet::from([header]);
    let mut stack = vec![src];
    while let Some(n) = stack.pop() {
        if body.insert(n) {
            stack.extend(
                cfg.preds[n as usize]
                    .iter()
                    .copied()
                    .filter(|p| cfg.reachable(*p)),
            );
        }
    }
    body
}
