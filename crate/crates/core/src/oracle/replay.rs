use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::{Arc, Mutex};

use once_cell::sync::OnceCell;
use serde::{Deserialize, Serialize};

use super::{BudgetLedger, LikelihoodOracle, TokenLikelihoods};
use crate::corpus::{Instance, SubsetMask};
use crate::error::{Error, Result};
use crate::io::write_atomic;

/// One line of a persisted replay store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayRecord {
    pub instance_id: String,
    /// [`SubsetMask::to_hex`] of the scored mask.
    pub mask: String,
    pub values: Vec<f64>,
}

type Key = (String, String);

/// Memoizing oracle keyed by `(instance id, mask bits)`.
///
/// The first evaluation of a key is delegated to the inner oracle and
/// recorded; later ones are answered from the store. Concurrent first
/// requests for one key are serialized so the inner oracle sees each key at
/// most once. With no inner oracle the store is replay-only and a miss is an
/// error.
pub struct ReplayOracle<O> {
    inner: Option<O>,
    entries: Mutex<BTreeMap<Key, Arc<OnceCell<Vec<f64>>>>>,
}

impl<O: LikelihoodOracle> ReplayOracle<O> {
    pub fn new(inner: O) -> Self {
        Self {
            inner: Some(inner),
            entries: Mutex::default(),
        }
    }

    /// Reload a store written by [`ReplayOracle::save`], optionally backed
    /// by an inner oracle for keys not yet recorded.
    pub fn load(path: impl AsRef<Path>, inner: Option<O>) -> Result<Self> {
        let file = File::open(path.as_ref())?;
        let mut map: BTreeMap<Key, Arc<OnceCell<Vec<f64>>>> = BTreeMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record = parse_record(&line, i + 1)?;
            let key = (record.instance_id, record.mask);
            if let Some(existing) = map.get(&key) {
                if existing.get() != Some(&record.values) {
                    return Err(Error::Integrity {
                        key: format!("{}/{}", key.0, key.1),
                        reason: "key recorded twice with different values".into(),
                    });
                }
                continue;
            }
            map.insert(key, Arc::new(OnceCell::with_value(record.values)));
        }
        Ok(Self {
            inner,
            entries: Mutex::new(map),
        })
    }

    pub fn inner(&self) -> Option<&O> {
        self.inner.as_ref()
    }

    /// Number of recorded keys.
    pub fn len(&self) -> usize {
        self.lock().values().filter(|c| c.get().is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Recorded entries in key order.
    pub fn records(&self) -> Vec<ReplayRecord> {
        self.lock()
            .iter()
            .filter_map(|((id, mask), cell)| {
                cell.get().map(|values| ReplayRecord {
                    instance_id: id.clone(),
                    mask: mask.clone(),
                    values: values.clone(),
                })
            })
            .collect()
    }

    /// Persist as JSONL, replacing `path` atomically.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for record in self.records() {
            out.push_str(&serde_json::to_string(&record).expect("record serializes"));
            out.push('\n');
        }
        write_atomic(path.as_ref(), out.as_bytes())
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, BTreeMap<Key, Arc<OnceCell<Vec<f64>>>>> {
        self.entries.lock().unwrap_or_else(|p| p.into_inner())
    }
}

impl<O: LikelihoodOracle> LikelihoodOracle for ReplayOracle<O> {
    fn score(&self, instance: &Instance, mask: &SubsetMask) -> Result<TokenLikelihoods> {
        instance.check_mask(mask)?;
        let key = (instance.id().to_string(), mask.to_hex());
        let cell = self.lock().entry(key.clone()).or_default().clone();

        let mut delegated = false;
        let values = cell.get_or_try_init(|| {
            let inner = self.inner.as_ref().ok_or_else(|| Error::ReplayMiss {
                key: format!("{}/{}", key.0, key.1),
            })?;
            delegated = true;
            inner.score(instance, mask).map(|l| l.values().to_vec())
        })?;
        if !delegated {
            if let Some(ledger) = self.ledger() {
                ledger.record_hit();
            }
        }
        if values.len() != instance.n_tokens() {
            return Err(Error::Integrity {
                key: format!("{}/{}", key.0, key.1),
                reason: format!(
                    "stored {} likelihoods but the instance has T = {}",
                    values.len(),
                    instance.n_tokens()
                ),
            });
        }
        TokenLikelihoods::new(values.clone())
    }

    fn ledger(&self) -> Option<&BudgetLedger> {
        self.inner.as_ref().and_then(|o| o.ledger())
    }
}

fn parse_record(line: &str, line_no: usize) -> Result<ReplayRecord> {
    let record: ReplayRecord = serde_json::from_str(line).map_err(|e| Error::Integrity {
        key: guess_key(line).unwrap_or_else(|| format!("<line {line_no}>")),
        reason: format!("line {line_no}: {e}"),
    })?;
    let key = format!("{}/{}", record.instance_id, record.mask);
    let bad = |reason: &str| Error::Integrity {
        key: key.clone(),
        reason: format!("line {line_no}: {reason}"),
    };
    if record.mask.is_empty() || !record.mask.chars().all(|c| c.is_ascii_hexdigit()) {
        return Err(bad("mask is not a hex string"));
    }
    if record.values.is_empty() {
        return Err(bad("no likelihood values"));
    }
    if record
        .values
        .iter()
        .any(|v| !v.is_finite() || *v <= 0.0 || *v > 1.0)
    {
        return Err(bad("likelihood outside (0, 1]"));
    }
    Ok(record)
}

/// Pull `instance_id/mask` out of a damaged line so errors can name the key.
fn guess_key(line: &str) -> Option<String> {
    let field = |name: &str| {
        let tag = format!("\"{name}\":\"");
        let start = line.find(&tag)? + tag.len();
        let rest = &line[start..];
        Some(rest[..rest.find('"').unwrap_or(rest.len())].to_string())
    };
    let id = field("instance_id")?;
    Some(match field("mask") {
        Some(mask) => format!("{id}/{mask}"),
        None => format!("{id}/?"),
    })
}
