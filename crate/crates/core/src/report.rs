//! Residual records produced by every verification check.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

/// One compared quantity. The node passes iff `residual <= tolerance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualNode {
    pub t: f64,
    pub residual: f64,
    pub tolerance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl ResidualNode {
    pub fn new(t: f64, residual: f64, tolerance: f64) -> Self {
        ResidualNode { t, residual, tolerance, label: None }
    }

    pub fn labeled(t: f64, residual: f64, tolerance: f64, label: impl Into<String>) -> Self {
        ResidualNode { t, residual, tolerance, label: Some(label.into()) }
    }

    pub fn passes(&self) -> bool {
        self.residual <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub scenario: String,
    pub check: String,
    pub premise: String,
    pub nodes: Vec<ResidualNode>,
    pub fitted_constants: BTreeMap<String, f64>,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    /// Auxiliary tables (e.g. the per-radius jet statistics), keyed by name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tables: BTreeMap<String, Vec<Vec<f64>>>,
}

impl VerificationReport {
    pub fn new(scenario: impl Into<String>, check: impl Into<String>, premise: impl Into<String>) -> Self {
        VerificationReport {
            scenario: scenario.into(),
            check: check.into(),
            premise: premise.into(),
            nodes: Vec::new(),
            fitted_constants: BTreeMap::new(),
            verdict: Verdict::Pass,
            notes: Vec::new(),
            tables: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, node: ResidualNode) {
        self.nodes.push(node);
    }

    pub fn fit(&mut self, name: &str, value: f64) {
        self.fitted_constants.insert(name.to_string(), value);
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    pub fn failing_nodes(&self) -> impl Iterator<Item = &ResidualNode> {
        self.nodes.iter().filter(|n| !n.passes())
    }

    /// Sets the verdict from the nodes: `Fail` if any node is out of tolerance.
    pub fn conclude(mut self) -> Self {
        self.verdict = if self.failing_nodes().next().is_some() {
            Verdict::Fail
        } else {
            Verdict::Pass
        };
        self
    }

    /// Largest `residual - tolerance` over all nodes (negative when everything passes).
    pub fn worst_margin(&self) -> f64 {
        self.nodes
            .iter()
            .map(|n| n.residual - n.tolerance)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }

    /// Merges `other` into `self`, prefixing labels; the combined verdict is the worst of both.
    pub fn absorb(&mut self, prefix: &str, other: VerificationReport) {
        for mut n in other.nodes {
            n.label = Some(match n.label {
                Some(l) => format!("{prefix}/{l}"),
                None => prefix.to_string(),
            });
            self.nodes.push(n);
        }
        for (k, v) in other.fitted_constants {
            self.fitted_constants.insert(format!("{prefix}.{k}"), v);
        }
        for (k, v) in other.tables {
            self.tables.insert(format!("{prefix}.{k}"), v);
        }
        self.notes.extend(other.notes.into_iter().map(|n| format!("{prefix}: {n}")));
        self.verdict = worst(self.verdict, other.verdict);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn worst(a: Verdict, b: Verdict) -> Verdict {
    use Verdict::*;
    match (a, b) {
        (Fail, _) | (_, Fail) => Fail,
        (Inconclusive, _) | (_, Inconclusive) => Inconclusive,
        _ => Pass,
    }
}
