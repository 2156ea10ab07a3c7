use serde::Serialize;

/// Per-method size accounting. Key names are part of the `--report` JSON schema.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MethodRow {
    pub method: String,
    #[serde(rename = "countBefore")]
    pub count_before: usize,
    #[serde(rename = "countAfter")]
    pub count_after: usize,
    /// Innermost-loop headers that received a checkpoint.
    #[serde(rename = "L")]
    pub loops: usize,
    /// Original invoke-class instructions.
    #[serde(rename = "V")]
    pub invokes: usize,
    pub delta: usize,
}

impl MethodRow {
    /// `countAfter - countBefore == 4 + 2L + V`
    pub fn identity_holds(&self) -> bool {
        self.count_after == self.count_before + 4 + 2 * self.loops + self.invokes
            && self.delta == self.count_after - self.count_before
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Totals {
    #[serde(rename = "countBefore")]
    pub count_before: usize,
    #[serde(rename = "countAfter")]
    pub count_after: usize,
    pub delta: usize,
    #[serde(rename = "overheadPct")]
    pub overhead_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InstrumentationReport {
    pub methods: Vec<MethodRow>,
    pub total: Totals,
}

impl InstrumentationReport {
    pub fn from_rows(methods: Vec<MethodRow>) -> Self {
        let count_before = methods.iter().map(|r| r.count_before).sum();
        let count_after = methods.iter().map(|r| r.count_after).sum();
        InstrumentationReport {
            total: Totals {
                count_before,
                count_after,
                delta: count_after - count_before,
                overhead_pct: overhead_pct(count_before as f64, count_after as f64),
            },
            methods,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// `(after - before) / before`, as a percentage.
pub fn overhead_pct(before: f64, after: f64) -> f64 {
    if before == 0.0 {
        0.0
    } else {
        (after - before) / before * 100.0
    }
}

/// Reference rows for the space table, as published for the JVM implementation.
pub const REFERENCE_SPACE_ROWS: [(&str, u64, u64); 2] = [("Simple", 52, 60), ("Complex", 151, 171)];

/// Renders rows of `(app, normal, instrumented)` instruction counts in the space-overhead table
/// layout, followed by the reference rows, labelled as such.
pub fn render_space_table(rows: &[(String, u64, u64)]) -> String {
    let mut out = String::new();
    out.push_str("Space overhead (No. of bytecode instructions)\n");
    out.push_str(&format!(
        "{:<24} {:>8} {:>13} {:>9}\n",
        "App", "Normal", "Instrumented", "Overhead"
    ));
    for (app, before, after) in rows {
        out.push_str(&format!(
            "{:<24} {:>8} {:>13} {:>8.0}%\n",
            app,
            before,
            after,
            overhead_pct(*before as f64, *after as f64)
        ));
    }
    for (app, before, after) in REFERENCE_SPACE_ROWS {
        out.push_str(&format!(
            "{:<24} {:>8} {:>13} {:>8.0}%\n",
            format!("{app} (reference)"),
            before,
            after,
            overhead_pct(before as f64, after as f64)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_rows_round_like_the_published_table() {
        let t = render_space_table(&[]);
        let simple = t.lines().find(|l| l.starts_with("Simple")).unwrap();
        let complex = t.lines().find(|l| l.starts_with("Complex")).unwrap();
        assert!(simple.contains("(reference)"));
        let fields: Vec<&str> = simple.split_whitespace().collect();
        assert_eq!(&fields[2..], ["52", "60", "15%"]);
        let fields: Vec<&str> = complex.split_whitespace().collect();
        assert_eq!(&fields[2..], ["151", "171", "13%"]);
    }

    #[test]
    fn json_keys() {
        let r = InstrumentationReport::from_rows(vec![MethodRow {
            method: "main".into(),
            count_before: 1,
            count_after: 5,
            loops: 0,
            invokes: 0,
            delta: 4,
        }]);
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        let row = &v["methods"][0];
        for k in ["method", "countBefore", "countAfter", "L", "V", "delta"] {
            assert!(row.get(k).is_some(), "missing {k}");
        }
        assert_eq!(v["total"]["overheadPct"], 400.0);
    }
}
