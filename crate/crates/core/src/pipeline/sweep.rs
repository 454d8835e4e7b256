//! One-axis ablations over α, β and the contrast base.
//!
//! α and base-contrast sweeps only re-decode; β sweeps retrain DPO from the
//! shared OPPU adapters. Each value yields the aggregate row of the `cope`
//! method, with TAM greedy as the win-rate baseline.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::exec;
use crate::metrics::{EvalReport, MethodAggregate};
use crate::prefopt::{read_preference_jsonl, DpoConfig};
use crate::tinylm::checkpoint::save_adapter;
use crate::tinylm::AdapterDelta;

use super::{
    decode_user, evaluate_user, file_hash, mix_seed, train_user_dpo, write_file, BaseContrast,
    Pipeline, Stage, BASELINE, DPO_STREAM,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Alpha,
    Beta,
    BaseContrast,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Alpha => "alpha",
            SweepAxis::Beta => "beta",
            SweepAxis::BaseContrast => "base_contrast",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(Self::Alpha),
            "beta" => Ok(Self::Beta),
            "base_contrast" => Ok(Self::BaseContrast),
            _ => Err(Error::Config(format!("sweep axis must be alpha, beta or base_contrast, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub aggregate: MethodAggregate,
    /// Content hashes of the checkpoints behind this row.
    pub checkpoints: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("axis,value,rouge1_mean,rougeL_mean,perplexity_mean,reward_mean,rougeL_win_rate\n");
        for r in &self.rows {
            let a = &r.aggregate;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                self.axis.name(),
                r.value,
                a.rouge1_mean,
                a.rouge_l_mean,
                a.perplexity_mean,
                a.reward_mean,
                a.rouge_l_win_rate
            );
        }
        out
    }
}

enum Setting {
    Alpha(f64),
    Beta(f64),
    Contrast(BaseContrast),
}

fn parse_setting(axis: SweepAxis, v: &str) -> Result<Setting> {
    let num = |what: &str| -> Result<f64> {
        v.trim()
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| Error::Config(format!("{what} sweep value {v:?} is not a number")))
    };
    Ok(match axis {
        SweepAxis::Alpha => {
            let a = num("alpha")?;
            if a < 0.0 {
                return Err(Error::Config(format!("alpha {a} < 0")));
            }
            Setting::Alpha(a)
        }
        SweepAxis::Beta => {
            let b = num("beta")?;
            if b <= 0.0 {
                return Err(Error::Config(format!("beta {b} must be > 0")));
            }
            Setting::Beta(b)
        }
        SweepAxis::BaseContrast => Setting::Contrast(v.trim().parse()?),
    })
}

/// Runs the upstream stages if needed, then one evaluation per value.
pub fn ablation_sweep(p: &mut Pipeline, axis: SweepAxis, values: &[String]) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let settings = values
        .iter()
        .map(|v| parse_setting(axis, v))
        .collect::<Result<Vec<_>>>()?;
    p.run_through(Stage::TrainDpo)?;
    let base = p.base_models()?;
    let users = p.users()?;
    let oppu: Vec<AdapterDelta> = users
        .iter()
        .map(|u| p.load_user_adapter(&base, "oppu", &u.user_id))
        .collect::<Result<_>>()?;
    let mut shared = BTreeMap::new();
    shared.insert("tam".to_string(), base.tam_hash.clone());
    for u in &users {
        let k = format!("oppu/{}", u.user_id);
        shared.insert(k, file_hash(&p.adapter_path("oppu", &u.user_id))?);
    }
    let sweep_dir = p.run_dir().join("sweeps").join(axis.name());
    let mut rows = Vec::new();
    for (value, setting) in values.iter().zip(settings) {
        let mut dcfg = p.config().decode_config();
        let mut contrast = p.config().base_contrast;
        let mut checkpoints = shared.clone();
        let dpo: Vec<AdapterDelta> = match setting {
            Setting::Alpha(a) => {
                dcfg.alpha = a;
                main_dpo(p, &base, &users, &mut checkpoints)?
            }
            Setting::Contrast(c) => {
                contrast = c;
                main_dpo(p, &base, &users, &mut checkpoints)?
            }
            Setting::Beta(b) => {
                let trained = exec::par_map_range(users.len(), |i| {
                    let prefs = read_preference_jsonl(&p.negatives_path(&users[i].user_id))?;
                    let cfg = DpoConfig {
                        beta: b,
                        seed: mix_seed(p.config().seed, DPO_STREAM + i as u64),
                        ..p.config().dpo_config()
                    };
                    train_user_dpo(&base, &oppu[i], &prefs, &cfg).map(|(a, _)| a)
                });
                let mut out = Vec::new();
                for (u, r) in users.iter().zip(trained) {
                    let adapter = r?;
                    let path = sweep_dir.join(value.trim()).join("dpo").join(format!("{}.bin", u.user_id));
                    std::fs::create_dir_all(path.parent().expect("dir"))
                        .map_err(|e| Error::io(&path, e))?;
                    let h = save_adapter(&path, &adapter, base.dims, &base.vocab, &base.tam_hash)?;
                    checkpoints.insert(format!("dpo/{}", u.user_id), h);
                    out.push(adapter);
                }
                out
            }
        };
        let per_user = exec::par_map_range(users.len(), |i| {
            let test = p.test_set(&base.vocab, &users[i].user_id)?;
            let (records, _) = decode_user(&base, &test, &oppu[i], &dpo[i], contrast, &[BASELINE, "cope"], &dcfg)?;
            evaluate_user(&base, &test, &dpo[i], &records)
        });
        let mut all = Vec::new();
        for r in per_user {
            all.extend(r?);
        }
        let report = EvalReport::from_rows(all, BASELINE)?;
        let aggregate = report
            .method("cope")
            .cloned()
            .expect("cope rows were generated");
        rows.push(SweepRow {
            value: value.trim().to_string(),
            aggregate,
            checkpoints,
        });
    }
    let report = SweepReport { axis, rows };
    write_file(&sweep_dir.with_extension("csv"), &report.to_csv())?;
    Ok(report)
}

fn main_dpo(
    p: &Pipeline,
    base: &super::BaseModels,
    users: &[crate::corpus::UserSpec],
    checkpoints: &mut BTreeMap<String, String>,
) -> Result<Vec<AdapterDelta>> {
    users
        .iter()
        .map(|u| {
            checkpoints.insert(
                format!("dpo/{}", u.user_id),
                file_hash(&p.adapter_path("dpo", &u.user_id))?,
            );
            p.load_user_adapter(base, "dpo", &u.user_id)
        })
        .collect()
}
