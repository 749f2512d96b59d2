use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attribution method identifier, as written in result files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cts,
    Shap,
    #[serde(rename = "contextcite")]
    ContextCite,
    Loo,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Cts, Method::Shap, Method::ContextCite, Method::Loo];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Cts => "cts",
            Method::Shap => "shap",
            Method::ContextCite => "contextcite",
            Method::Loo => "loo",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::contract(format!(
                    "unknown method `{s}` (expected one of cts, shap, contextcite, loo)"
                ))
            })
    }
}

/// Per-segment scores and their ranking for one (instance, method) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributionResult {
    pub instance_id: String,
    pub method: Method,
    pub scores: Vec<f64>,
    pub ranking: Vec<usize>,
    pub oracle_calls: u64,
    pub seed: u64,
}

impl AttributionResult {
    pub fn new(
        instance_id: impl Into<String>,
        method: Method,
        scores: Vec<f64>,
        oracle_calls: u64,
        seed: u64,
    ) -> Self {
        let ranking = rank(&scores);
        Self {
            instance_id: instance_id.into(),
            method,
            scores,
            ranking,
            oracle_calls,
            seed,
        }
    }

    /// Check that `ranking` is the descending order of `scores` with index
    /// tie-breaks; useful after deserializing foreign files.
    pub fn validate(&self) -> Result<()> {
        if self.ranking != rank(&self.scores) {
            return Err(Error::validation(
                &self.instance_id,
                format!("ranking of {} result does not sort its scores", self.method),
            ));
        }
        Ok(())
    }

    /// The `k` highest-ranked segments (all of them if `k >= N`).
    pub fn top_k(&self, k: usize) -> &[usize] {
        &self.ranking[..k.min(self.ranking.len())]
    }
}

/// Segment indices sorted by descending score; ties keep ascending index.
/// NaN sorts last.
pub fn rank(scores: &[f64]) -> Vec<usize> {
    let key = |v: f64| if v.is_nan() { f64::NEG_INFINITY } else { v };
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| key(scores[b]).total_cmp(&key(scores[a])));
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rank_examples() {
        assert_eq!(rank(&[0.1, 0.9, 0.5]), [1, 2, 0]);
        assert_eq!(rank(&[0.3; 4]), [0, 1, 2, 3]);
        assert_eq!(rank(&[7.0]), [0]);
        assert_eq!(rank(&[f64::NAN, 0.0]), [1, 0]);
    }

    #[test]
    fn json_shape() {
        let r = AttributionResult::new("a", Method::ContextCite, vec![0.5, 1.0], 7, 3);
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys.len(), 6, "unexpected keys {keys:?}");
        assert_eq!(v["method"], "contextcite");
        assert_eq!(v["ranking"], serde_json::json!([1, 0]));
        let back: AttributionResult = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
        back.validate().unwrap();
    }

    #[test]
    fn method_names() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("lime".parse::<Method>().is_err());
    }

    proptest! {
        #[test]
        fn ranking_sorts_descending(scores in prop::collection::vec(-3i32..3, 1..20)) {
            let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
            let r = rank(&s);
            let mut seen = r.clone();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..s.len()).collect::<Vec<_>>());
            for w in r.windows(2) {
                prop_assert!(s[w[0]] > s[w[1]] || (s[w[0]] == s[w[1]] && w[0] < w[1]));
            }
        }
    }
}
