//! Seeded experiment grids: embed, attack, extract, measure.
//!
//! A manifest lists edit configurations, attacks and seeds. For each
//! (edit config, seed) the watermark is embedded once; every attack is then
//! applied to a copy of that model. Rows come out in manifest order
//! (config, attack, seed) whatever the worker count.
//!
//! Per seed `s`: the key is `s`, the watermark is `random_watermark(s, bits)`,
//! the editor noise seed is `config.noise_seed + s` and the attack seed is
//! `s + attack_seed_offset`.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{embed_watermark, extract, measure, random_watermark, Embedding};
use crate::attacks::AttackSpec;
use crate::codec::{capacity, CapacityParams};
use crate::editor::EditConfig;
use crate::error::{Error, Result};
use crate::generator::{builtin_templates, template_by_id, QuestionTemplate, SeedKey};
use crate::toymodel::{init_model, ModelConfig, ModelState};

/// Column order of the CSV report.
pub const CSV_COLUMNS: [&str; 9] =
    ["kind", "intensity", "seed", "esr", "bit_accuracy", "fidelity", "time_s", "config", "error"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditVariant {
    pub name: String,
    #[serde(default)]
    pub config: EditConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepManifest {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_n")]
    pub n: u32,
    #[serde(default = "default_m")]
    pub m: u32,
    /// Watermark length in bits.
    #[serde(default = "default_bits")]
    pub bits: usize,
    pub seeds: Vec<u64>,
    #[serde(default = "default_variants")]
    pub edit_configs: Vec<EditVariant>,
    pub attacks: Vec<AttackSpec>,
    /// Template ids; empty means the built-in set.
    #[serde(default)]
    pub templates: Vec<u32>,
    #[serde(default = "default_attack_seed_offset")]
    pub attack_seed_offset: u64,
    /// Worker threads; 0 uses all cores.
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Fill `time_s` with measured embedding time. Off by default so reports
    /// are reproducible byte for byte.
    #[serde(default)]
    pub timing: bool,
}

fn default_n() -> u32 {
    89
}
fn default_m() -> u32 {
    5
}
fn default_bits() -> usize {
    128
}
fn default_variants() -> Vec<EditVariant> {
    vec![EditVariant { name: "default".into(), config: EditConfig::default() }]
}
fn default_attack_seed_offset() -> u64 {
    10_000
}
fn default_workers() -> usize {
    1
}

impl SweepManifest {
    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        capacity(self.n, self.m)?.questions_for(self.bits)?;
        if self.seeds.is_empty() || self.attacks.is_empty() || self.edit_configs.is_empty() {
            return Err(Error::Config("manifest needs at least one seed, attack and edit config".into()));
        }
        for v in &self.edit_configs {
            v.config.validate()?;
        }
        for a in &self.attacks {
            a.validate()?;
        }
        self.resolve_templates().map(|_| ())
    }

    fn resolve_templates(&self) -> Result<Vec<QuestionTemplate>> {
        if self.templates.is_empty() {
            return Ok(builtin_templates());
        }
        self.templates
            .iter()
            .map(|&id| template_by_id(id).ok_or_else(|| Error::Config(format!("unknown template id {id}"))))
            .collect()
    }
}

/// One CSV row. Metric fields are empty when the cell failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kind: String,
    pub intensity: f64,
    pub seed: u64,
    pub esr: Option<f64>,
    pub bit_accuracy: Option<f64>,
    /// Preserved-fact agreement between the unwatermarked and attacked model.
    pub fidelity: Option<f64>,
    pub time_s: Option<f64>,
    pub config: String,
    /// Error code of a failed cell.
    pub error: Option<String>,
}

/// Mean and sample standard deviation over the successful rows of one
/// (config, kind, intensity) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub config: String,
    pub kind: String,
    pub intensity: f64,
    pub rows: usize,
    pub errors: usize,
    pub esr_mean: Option<f64>,
    pub esr_std: Option<f64>,
    pub bit_accuracy_mean: Option<f64>,
    pub bit_accuracy_std: Option<f64>,
    pub fidelity_mean: Option<f64>,
    pub fidelity_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub rows: usize,
    pub errors: usize,
    pub esr_mean: Option<f64>,
    pub bit_accuracy_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub groups: Vec<GroupSummary>,
    pub totals: Totals,
}

struct Baseline {
    bits: Vec<bool>,
    /// Error code if embedding failed.
    embedding: std::result::Result<Embedding, &'static str>,
}

pub fn run_sweep(manifest: &SweepManifest) -> Result<SweepReport> {
    manifest.validate()?;
    let templates = manifest.resolve_templates()?;
    let params = capacity(manifest.n, manifest.m)?;
    let model = init_model(&manifest.model)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(manifest.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;

    let bases: Vec<(usize, u64)> = (0..manifest.edit_configs.len())
        .flat_map(|c| manifest.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let baselines: Vec<Baseline> = pool.install(|| {
        bases
            .par_iter()
            .map(|&(c, seed)| {
                let bits = random_watermark(seed, manifest.bits);
                let base = &manifest.edit_configs[c].config;
                let config = EditConfig { noise_seed: base.noise_seed.wrapping_add(seed), ..base.clone() };
                let embedding =
                    embed_watermark(&model, SeedKey(seed), &bits, &params, &templates, &config).map_err(|e| e.code());
                Baseline { bits, embedding }
            })
            .collect()
    });

    let n_seeds = manifest.seeds.len();
    let cells: Vec<(usize, usize, usize)> = (0..manifest.edit_configs.len())
        .flat_map(|c| (0..manifest.attacks.len()).flat_map(move |a| (0..n_seeds).map(move |s| (c, a, s))))
        .collect();
    let rows: Vec<SweepRow> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(c, a, s)| {
                let variant = &manifest.edit_configs[c];
                let attack = &manifest.attacks[a];
                let seed = manifest.seeds[s];
                let base = &baselines[c * n_seeds + s];
                let outcome = run_cell(manifest, &model, &params, &templates, variant, attack, seed, base);
                let mut row = SweepRow {
                    kind: attack.kind().into(),
                    intensity: attack.intensity(),
                    seed,
                    esr: None,
                    bit_accuracy: None,
                    fidelity: None,
                    time_s: None,
                    config: variant.name.clone(),
                    error: None,
                };
                match outcome {
                    Ok((esr, acc, fid, time)) => {
                        row.esr = Some(esr);
                        row.bit_accuracy = Some(acc);
                        row.fidelity = Some(fid);
                        row.time_s = manifest.timing.then_some(time);
                    }
                    Err(code) => row.error = Some(code.into()),
                }
                row
            })
            .collect()
    });
    Ok(summarize(rows))
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    manifest: &SweepManifest,
    model: &ModelState,
    params: &CapacityParams,
    templates: &[QuestionTemplate],
    variant: &EditVariant,
    attack: &AttackSpec,
    seed: u64,
    base: &Baseline,
) -> std::result::Result<(f64, f64, f64, f64), &'static str> {
    let embedding = base.embedding.as_ref().map_err(|&code| code)?;
    let attack_seed = seed.wrapping_add(manifest.attack_seed_offset);
    let attacked = attack.apply(&embedding.model, attack_seed, params, &variant.config).map_err(|e| e.code())?;
    let result = extract(&attacked, SeedKey(seed), params, manifest.bits, templates, Some(&base.bits))
        .map_err(|e| e.code())?;
    let m = measure(model, &attacked, &result, &base.bits, embedding.embed_seconds);
    Ok((m.esr, m.bit_accuracy, m.fidelity.preserved_agreement, m.embed_time_seconds))
}

fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (Some(mean), Some(std))
}

fn summarize(rows: Vec<SweepRow>) -> SweepReport {
    let mut groups: Vec<GroupSummary> = Vec::new();
    let mut members: Vec<Vec<&SweepRow>> = Vec::new();
    for row in &rows {
        let pos = groups.iter().position(|g| {
            g.config == row.config && g.kind == row.kind && g.intensity.to_bits() == row.intensity.to_bits()
        });
        let i = pos.unwrap_or_else(|| {
            groups.push(GroupSummary {
                config: row.config.clone(),
                kind: row.kind.clone(),
                intensity: row.intensity,
                rows: 0,
                errors: 0,
                esr_mean: None,
                esr_std: None,
                bit_accuracy_mean: None,
                bit_accuracy_std: None,
                fidelity_mean: None,
                fidelity_std: None,
            });
            members.push(Vec::new());
            groups.len() - 1
        });
        members[i].push(row);
    }
    for (g, rs) in groups.iter_mut().zip(&members) {
        g.rows = rs.len();
        g.errors = rs.iter().filter(|r| r.error.is_some()).count();
        let col = |f: fn(&SweepRow) -> Option<f64>| rs.iter().filter_map(|r| f(r)).collect::<Vec<_>>();
        (g.esr_mean, g.esr_std) = mean_std(&col(|r| r.esr));
        (g.bit_accuracy_mean, g.bit_accuracy_std) = mean_std(&col(|r| r.bit_accuracy));
        (g.fidelity_mean, g.fidelity_std) = mean_std(&col(|r| r.fidelity));
    }
    let esr: Vec<f64> = rows.iter().filter_map(|r| r.esr).collect();
    let acc: Vec<f64> = rows.iter().filter_map(|r| r.bit_accuracy).collect();
    let totals = Totals {
        rows: rows.len(),
        errors: rows.iter().filter(|r| r.error.is_some()).count(),
        esr_mean: mean_std(&esr).0,
        bit_accuracy_mean: mean_std(&acc).0,
    };
    SweepReport { rows, groups, totals }
}

impl SweepReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Parse(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Groups and totals, without the rows.
    pub fn summary_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Summary<'a> {
            groups: &'a [GroupSummary],
            totals: &'a Totals,
        }
        Ok(serde_json::to_string_pretty(&Summary { groups: &self.groups, totals: &self.totals })?)
    }
}

/// Writes the CSV rows and the JSON summary.
pub fn write_reports(report: &SweepReport, csv_path: impl AsRef<Path>, json_path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(csv_path, report.to_csv()?)?;
    std::fs::write(json_path, report.summary_json()? + "\n")?;
    Ok(())
}
