//! Recounts L and V from assembly text without the library's parser or CFG code.
//!
//! V is a mnemonic count. L comes from label arithmetic: a jump whose target is at or before
//! it closes a loop headed by the target, spanning up to the furthest such jump; a header is
//! innermost when no other header lies strictly inside its span. That matches dominator-based
//! natural loops for the structured code in the corpus.

use std::collections::{BTreeMap, BTreeSet};

const INVOKE_CLASS: [&str; 8] = [
    "INVOKE", "SPAWN", "SLEEP", "MENTER", "MEXIT", "MWAIT", "MNOTIFY", "MNOTIFYALL",
];

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct Counts {
    pub instructions: usize,
    pub loops: usize,
    pub invokes: usize,
}

/// Method name, instruction words, label positions.
type OpenMethod = (String, Vec<Vec<String>>, BTreeMap<String, usize>);

pub fn count_methods(src: &str) -> BTreeMap<String, Counts> {
    let mut out = BTreeMap::new();
    let mut current: Option<OpenMethod> = None;
    for raw in src.lines() {
        let line = match raw.find('#') {
            Some(i) if !raw[..i].contains('"') => &raw[..i],
            _ => raw,
        };
        let mut words: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if words.is_empty() {
            continue;
        }
        match words[0].as_str() {
            ".method" => {
                current = Some((words[1].clone(), Vec::new(), BTreeMap::new()));
                continue;
            }
            ".end" => {
                let (name, code, labels) = current.take().unwrap();
                out.insert(name, tally(&code, &labels));
                continue;
            }
            w if w.starts_with('.') => continue,
            _ => {}
        }
        let (_, code, labels) = current.as_mut().unwrap();
        while let Some(w) = words.first() {
            if let Some(label) = w.strip_suffix(':') {
                labels.insert(label.to_string(), code.len());
                words.remove(0);
            } else {
                break;
            }
        }
        if !words.is_empty() {
            code.push(words);
        }
    }
    out
}

fn tally(code: &[Vec<String>], labels: &BTreeMap<String, usize>) -> Counts {
    let invokes = code
        .iter()
        .filter(|w| INVOKE_CLASS.contains(&w[0].to_uppercase().as_str()))
        .count();
    let mut span: BTreeMap<usize, usize> = BTreeMap::new();
    for (pc, w) in code.iter().enumerate() {
        let mn = w[0].to_uppercase();
        if mn == "JMP" || mn == "JMPIF" {
            let target = labels
                .get(&w[1])
                .copied()
                .unwrap_or_else(|| w[1].parse().unwrap());
            if target <= pc {
                let end = span.entry(target).or_insert(pc);
                *end = (*end).max(pc);
            }
        }
    }
    let headers: BTreeSet<usize> = span.keys().copied().collect();
    let loops = span
        .iter()
        .filter(|(h, end)| !headers.iter().any(|o| *o > **h && *o <= **end))
        .count();
    Counts {
        instructions: code.len(),
        loops,
        invokes,
    }
}
