//! Instruction-level control-flow graph and dominator analysis.
//!
//! Every pc is a node. Dominators use the iterative algorithm of Cooper, Harvey and Kennedy
//! over reverse postorder, which is plenty at method scale.

use super::instr::{Instr, Pc};

#[derive(Clone, Debug)]
pub struct Cfg {
    pub succs: Vec<Vec<Pc>>,
    pub preds: Vec<Vec<Pc>>,
    /// Reverse postorder of nodes reachable from pc 0.
    pub rpo: Vec<Pc>,
    /// Immediate dominator per pc; `None` for unreachable pcs. The entry is its own idom.
    pub idom: Vec<Option<Pc>>,
    /// Edges `(src, dst)` that close a cycle in the DFS from the entry.
    pub retreating: Vec<(Pc, Pc)>,
}

impl Cfg {
    /// Builds the graph. Out-of-range targets and fall-through past the end are dropped; the
    /// verifier reports those separately.
    pub fn build(code: &[Instr]) -> Cfg {
        let n = code.len();
        let mut succs = vec![Vec::new(); n];
        for (pc, instr) in code.iter().enumerate() {
            let mut s: Vec<Pc> = instr
                .branch_targets()
                .into_iter()
                .filter(|t| (*t as usize) < n)
                .collect();
            if !instr.is_terminator() && pc + 1 < n {
                s.push(pc as Pc + 1);
            }
            s.sort_unstable();
            s.dedup();
            succs[pc] = s;
        }
        let mut preds = vec![Vec::new(); n];
        for (pc, s) in succs.iter().enumerate() {
            for t in s {
                preds[*t as usize].push(pc as Pc);
            }
        }

        // Iterative DFS for postorder and retreating edges.
        let mut post = Vec::with_capacity(n);
        let mut retreating = Vec::new();
        if n > 0 {
            #[derive(Clone, Copy, PartialEq)]
            enum Mark {
                White,
                OnStack,
                Done,
            }
            let mut mark = vec![Mark::White; n];
            let mut stack: Vec<(usize, usize)> = vec![(0, 0)];
            mark[0] = Mark::OnStack;
            while let Some(&mut (node, ref mut next)) = stack.last_mut() {
                if *next < succs[node].len() {
                    let t = succs[node][*next] as usize;
                    *next += 1;
                    match mark[t] {
                        Mark::White => {
                            mark[t] = Mark::OnStack;
                            stack.push((t, 0));
                        }
                        Mark::OnStack => retreating.push((node as Pc, t as Pc)),
                        Mark::Done => {}
                    }
                } else {
                    mark[node] = Mark::Done;
                    post.push(node as Pc);
                    stack.pop();
                }
            }
        }
        let rpo: Vec<Pc> = post.iter().rev().copied().collect();
        retreating.sort_unstable();

        let idom = dominators(n, &preds, &rpo);
        Cfg {
            succs,
            preds,
            rpo,
            idom,
            retreating,
        }
    }

    pub fn reachable(&self, pc: Pc) -> bool {
        self.idom.get(pc as usize).is_some_and(Option::is_some)
    }

    /// Does `a` dominate `b`? Both must be reachable.
    pub fn dominates(&self, a: Pc, b: Pc) -> bool {
        let mut cur = b;
        loop {
            if cur == a {
                return true;
            }
            match self.idom[cur as usize] {
                Some(d) if d != cur => cur = d,
                _ => return false,
            }
        }
    }
}

fn dominators(n: usize, preds: &[Vec<Pc>], rpo: &[Pc]) -> Vec<Option<Pc>> {
    let mut idom: Vec<Option<Pc>> = vec![None; n];
    if rpo.is_empty() {
        return idom;
    }
    let mut order = vec![usize::MAX; n];
    for (i, pc) in rpo.iter().enumerate() {
        order[*pc as usize] = i;
    }
    idom[rpo[0] as usize] = Some(rpo[0]);
    let intersect = |idom: &[Option<Pc>], mut a: Pc, mut b: Pc| {
        while a != b {
            while order[a as usize] > order[b as usize] {
                a = idom[a as usize].expect("processed");
            }
            while order[b as usize] > order[a as usize] {
                b = idom[b as usize].expect("processed");
            }
        }
        a
    };
    let mut changed = true;
    while changed {
        changed = false;
        for &b in &rpo[1..] {
            let mut new_idom: Option<Pc> = None;
            for &p in &preds[b as usize] {
                if idom[p as usize].is_none() {
                    continue;
                }
                new_idom = Some(match new_idom {
                    None => p,
                    Some(cur) => intersect(&idom, p, cur),
                });
            }
            if new_idom.is_some() && idom[b as usize] != new_idom {
                idom[b as usize] = new_idom;
                changed = true;
            }
        }
    }
    idom
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::Value;

    #[test]
    fn diamond_dominators() {
        // 0: JMPIF 3 ; 1: CONST ; 2: JMP 4 ; 3: CONST ; 4: RETURN
        let code = vec![
            Instr::JmpIf(3),
            Instr::Const(Value::Int(1)),
            Instr::Jmp(4),
            Instr::Const(Value::Int(2)),
            Instr::Return(None),
        ];
        let cfg = Cfg::build(&code);
        assert_eq!(cfg.idom[4], Some(0));
        assert_eq!(cfg.idom[2], Some(1));
        assert!(cfg.dominates(0, 3));
        assert!(!cfg.dominates(1, 4));
        assert!(cfg.retreating.is_empty());
    }

    #[test]
    fn self_loop_is_retreating() {
        let code = vec![Instr::Jmp(0)];
        let cfg = Cfg::build(&code);
        assert_eq!(cfg.retreating, vec![(0, 0)]);
        assert!(cfg.dominates(0, 0));
    }
}
