//! Campaign aggregation and vulnerability reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::campaign::{CampaignMeta, CampaignRecord};
use crate::classify::Outcome;
use crate::error::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Domain label for events whose targets span several classes.
pub const MIXED_DOMAIN: &str = "Mixed";

/// Outcome counts for one slice of a campaign.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "StatsOut", from = "StatsOut")]
pub struct Stats {
    pub masked: u64,
    pub usable: u64,
    pub unusable: u64,
    pub engine_error: u64,
}

#[derive(Serialize, Deserialize)]
struct StatsOut {
    count: u64,
    masked: u64,
    usable: u64,
    unusable: u64,
    engine_error: u64,
    #[serde(default)]
    unusable_rate: f64,
}

impl From<Stats> for StatsOut {
    fn from(s: Stats) -> Self {
        StatsOut {
            count: s.count(),
            masked: s.masked,
            usable: s.usable,
            unusable: s.unusable,
            engine_error: s.engine_error,
            unusable_rate: s.unusable_rate(),
        }
    }
}

impl From<StatsOut> for Stats {
    fn from(s: StatsOut) -> Self {
        Stats {
            masked: s.masked,
            usable: s.usable,
            unusable: s.unusable,
            engine_error: s.engine_error,
        }
    }
}

impl Stats {
    pub fn count(&self) -> u64 {
        self.masked + self.usable + self.unusable + self.engine_error
    }

    pub fn get(&self, o: Outcome) -> u64 {
        match o {
            Outcome::Masked => self.masked,
            Outcome::Usable => self.usable,
            Outcome::Unusable => self.unusable,
            Outcome::EngineError => self.engine_error,
        }
    }

    /// Unusable experiments over all experiments; 0 when empty.
    pub fn unusable_rate(&self) -> f64 {
        match self.count() {
            0 => 0.0,
            n => self.unusable as f64 / n as f64,
        }
    }

    pub fn add(&mut self, o: Outcome) {
        match o {
            Outcome::Masked => self.masked += 1,
            Outcome::Usable => self.usable += 1,
            Outcome::Unusable => self.unusable += 1,
            Outcome::EngineError => self.engine_error += 1,
        }
    }

    pub fn merge(&mut self, o: &Stats) {
        self.masked += o.masked;
        self.usable += o.usable;
        self.unusable += o.unusable;
        self.engine_error += o.engine_error;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub totals: Stats,
    pub by_site: BTreeMap<String, Stats>,
    pub by_kind: BTreeMap<String, Stats>,
    pub by_variant: BTreeMap<String, Stats>,
    pub by_domain: BTreeMap<String, Stats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<CampaignMeta>,
}

impl Default for Report {
    fn default() -> Self {
        Report {
            schema_version: REPORT_SCHEMA_VERSION,
            totals: Stats::default(),
            by_site: BTreeMap::new(),
            by_kind: BTreeMap::new(),
            by_variant: BTreeMap::new(),
            by_domain: BTreeMap::new(),
            metadata: None,
        }
    }
}

fn merge_maps(a: &mut BTreeMap<String, Stats>, b: &BTreeMap<String, Stats>) {
    for (k, v) in b {
        a.entry(k.clone()).or_default().merge(v);
    }
}

impl Report {
    pub fn add(&mut self, r: &CampaignRecord) {
        self.totals.add(r.outcome);
        self.by_site.entry(r.site.clone()).or_default().add(r.outcome);
        self.by_kind.entry(r.kind.name().into()).or_default().add(r.outcome);
        if let Some(ev) = &r.event {
            self.by_variant
                .entry(ev.pattern.variant().name().into())
                .or_default()
                .add(r.outcome);
            let mut classes = ev.domains.iter().map(|d| d.class());
            if let Some(first) = classes.next() {
                let key = if classes.all(|c| c == first) {
                    first.name()
                } else {
                    MIXED_DOMAIN
                };
                self.by_domain.entry(key.into()).or_default().add(r.outcome);
            }
        }
    }

    /// Counts only; metadata is left as is.
    pub fn merge(&mut self, o: &Report) {
        self.totals.merge(&o.totals);
        merge_maps(&mut self.by_site, &o.by_site);
        merge_maps(&mut self.by_kind, &o.by_kind);
        merge_maps(&mut self.by_variant, &o.by_variant);
        merge_maps(&mut self.by_domain, &o.by_domain);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn summary_line(&self) -> String {
        let t = &self.totals;
        format!(
            "{} experiments: {} masked, {} usable, {} unusable, {} engine errors",
            t.count(),
            t.masked,
            t.usable,
            t.unusable,
            t.engine_error
        )
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.summary_line());
        if let Some(m) = &self.metadata {
            let _ = writeln!(
                s,
                "seed {}  policy {}  model {}",
                m.seed,
                m.policy,
                &m.model_digest[..m.model_digest.len().min(16)]
            );
        }
        table(&mut s, "operator kind", &self.by_kind);
        table(&mut s, "site", &self.by_site);
        table(&mut s, "spatial pattern", &self.by_variant);
        table(&mut s, "value domain", &self.by_domain);
        s
    }
}

/// Rows sorted by unusable rate, highest first.
fn table(s: &mut String, title: &str, rows: &BTreeMap<String, Stats>) {
    if rows.is_empty() {
        return;
    }
    let mut rows: Vec<(&String, &Stats)> = rows.iter().collect();
    rows.sort_by(|a, b| {
        b.1.unusable_rate()
            .total_cmp(&a.1.unusable_rate())
            .then_with(|| a.0.cmp(b.0))
    });
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0).max(title.len());
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{title:<width$}  {:>8} {:>8} {:>8} {:>8} {:>8} {:>9}",
        "count", "masked", "usable", "unusable", "errors", "unusable%"
    );
    for (k, st) in rows {
        let _ = writeln!(
            s,
            "{k:<width$}  {:>8} {:>8} {:>8} {:>8} {:>8} {:>8.2}%",
            st.count(),
            st.masked,
            st.usable,
            st.unusable,
            st.engine_error,
            100.0 * st.unusable_rate()
        );
    }
}

/// Folds records into a report. The result does not depend on record order.
pub fn aggregate(records: &[CampaignRecord]) -> Report {
    let mut r = Report::default();
    records.iter().for_each(|rec| r.add(rec));
    r
}

/// Parses JSON-lines records; errors carry the 1-based line number.
pub fn read_records(reader: impl BufRead) -> Result<Vec<CampaignRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let what = format!("records line {}", i + 1);
        let line = line.map_err(|e| Error::malformed(&what, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::malformed(&what, e))?);
    }
    Ok(out)
}
