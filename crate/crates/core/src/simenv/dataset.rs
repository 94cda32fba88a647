//! CSV export/import of simulated datasets.
//!
//! Column order: `record`, the seven raw covariates, `action_index`,
//! `action`, `propensity_0..propensity_{d-1}`, `conversion`, `reward`,
//! `true_reward_0..true_reward_{m-1}`. Booleans are written as 0/1 and floats
//! in shortest round-trip form, so a read-back is bit-exact.

use std::path::Path;

use super::{encode_full, encode_observed, EnvConfig, RawCovariates, SimulatedRecord, Simulation};
use crate::error::{Error, Result};
use crate::types::{LearningSample, LoggedSample};

pub const DATASET_FIXED_COLUMNS: [&str; 10] = [
    "record",
    "ticket_price",
    "lead_time",
    "passengers",
    "origin",
    "destination",
    "return_trip",
    "trip_duration",
    "action_index",
    "action",
];

fn header(d: usize, m: usize) -> Vec<String> {
    let mut h: Vec<String> = DATASET_FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    h.extend((0..d).map(|k| format!("propensity_{k}")));
    h.push("conversion".into());
    h.push("reward".into());
    h.extend((0..m).map(|k| format!("true_reward_{k}")));
    h
}

pub fn write_dataset_csv(sim: &Simulation, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    let d = sim.historical.len();
    let m = sim.evaluation.len();
    w.write_record(header(d, m)).map_err(|e| Error::csv(path, e))?;
    for (i, r) in sim.records.iter().enumerate() {
        let mut row = vec![
            i.to_string(),
            r.raw.ticket_price.to_string(),
            r.raw.lead_time.to_string(),
            r.raw.passengers.to_string(),
            r.raw.origin.to_string(),
            r.raw.destination.to_string(),
            u8::from(r.raw.return_trip).to_string(),
            r.raw.trip_duration.to_string(),
            r.action_index.to_string(),
            sim.historical.level(r.action_index).to_string(),
        ];
        row.extend(r.propensities.iter().map(|p| p.to_string()));
        row.push(u8::from(r.conversion).to_string());
        row.push(r.reward.to_string());
        row.extend(r.true_expected_rewards.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, line: usize) -> Result<T> {
    let raw = rec
        .get(idx)
        .ok_or_else(|| Error::Parse(format!("line {line}: missing column {idx}")))?;
    raw.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("line {line}: cannot parse column {idx} value {raw:?}")))
}

fn flag(rec: &csv::StringRecord, idx: usize, line: usize) -> Result<bool> {
    match field::<u8>(rec, idx, line)? {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(Error::Parse(format!("line {line}: expected 0/1, got {v}"))),
    }
}

/// Reads a dataset written by [`write_dataset_csv`]. Action grids come from
/// `cfg`; their sizes must match the file's propensity and true-reward columns.
pub fn read_dataset_csv(path: impl AsRef<Path>, cfg: &EnvConfig) -> Result<Simulation> {
    let path = path.as_ref();
    let historical = cfg.historical_actions.clone();
    let evaluation = cfg.evaluation();
    let d = historical.len();
    let m = evaluation.len();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let expected = header(d, m);
    let found: Vec<String> = reader
        .headers()
        .map_err(|e| Error::csv(path, e))?
        .iter()
        .map(|s| s.to_string())
        .collect();
    if found != expected {
        return Err(Error::Parse(format!(
            "{}: header does not match the configured action spaces (d={d}, m={m})",
            path.display()
        )));
    }
    let mut records = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let line = line + 2;
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let raw = RawCovariates {
            ticket_price: field(&rec, 1, line)?,
            lead_time: field(&rec, 2, line)?,
            passengers: field(&rec, 3, line)?,
            origin: field(&rec, 4, line)?,
            destination: field(&rec, 5, line)?,
            return_trip: flag(&rec, 6, line)?,
            trip_duration: field(&rec, 7, line)?,
        };
        raw.validate()?;
        let action_index: usize = field(&rec, 8, line)?;
        let action: f64 = field(&rec, 9, line)?;
        if action_index >= d || historical.level(action_index) != action {
            return Err(Error::Parse(format!(
                "line {line}: action {action} (index {action_index}) not in historical grid {historical}"
            )));
        }
        let base = DATASET_FIXED_COLUMNS.len();
        let propensities = (0..d)
            .map(|k| field(&rec, base + k, line))
            .collect::<Result<Vec<f64>>>()?;
        let conversion = flag(&rec, base + d, line)?;
        let reward: f64 = field(&rec, base + d + 1, line)?;
        let true_expected_rewards = (0..m)
            .map(|k| field(&rec, base + d + 2 + k, line))
            .collect::<Result<Vec<f64>>>()?;
        records.push(SimulatedRecord {
            encoded_observed: encode_observed(&raw),
            encoded_full: encode_full(&raw),
            raw,
            action_index,
            propensities,
            conversion,
            reward,
            true_expected_rewards,
        });
    }
    let logged = records
        .iter()
        .map(|r| {
            LoggedSample::new(
                r.encoded_observed.clone(),
                r.action_index,
                r.reward,
                r.propensities.clone(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Simulation {
        sample: LearningSample::new(logged, historical.clone())?,
        records,
        historical,
        evaluation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simenv::simulate;
    use crate::types::{ActionSpace, FixedDistributionPolicy};

    #[test]
    fn csv_round_trip_is_exact() {
        let mut cfg = EnvConfig::default_config();
        cfg.evaluation_actions = Some(ActionSpace::grid(-0.3, 0.3, 7).unwrap());
        let sim = simulate(
            &cfg.params,
            200,
            &FixedDistributionPolicy::uniform(5),
            &cfg.historical_actions,
            &cfg.evaluation(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        write_dataset_csv(&sim, &path).unwrap();
        let back = read_dataset_csv(&path, &cfg).unwrap();
        assert_eq!(back.records, sim.records);

        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("record,ticket_price,lead_time,passengers,origin,destination,return_trip,trip_duration,action_index,action,propensity_0"));

        // grid mismatch is reported, not silently accepted
        let plain = EnvConfig::default_config();
        assert!(read_dataset_csv(&path, &plain).is_err());
    }
}
