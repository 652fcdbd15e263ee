//! Model and Q-table persistence. Models are TOML with a documented key set;
//! Q tables are CSV with 17-significant-digit decimals so values round-trip
//! exactly through text.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::TabularOcmdp;
use crate::oracle::QTable;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    n_states: usize,
    n_ctrl: usize,
    d_obs: usize,
    gamma: f64,
    /// Row-major `[state][ctrl][next_state]`.
    transition: Vec<f64>,
    /// Row-major `[state][dim]`.
    obs_table: Vec<f64>,
    /// Row-major `[state][ctrl]`.
    reward: Vec<f64>,
    cost_vec: Vec<f64>,
    terminal: Vec<bool>,
    /// Optional start distribution, used by the brute-force solver.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    init: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct LoadedModel {
    pub model: TabularOcmdp,
    pub init: Option<Vec<f64>>,
}

pub fn save_model(path: &Path, model: &TabularOcmdp, init: Option<&[f64]>) -> Result<()> {
    let file = ModelFile {
        n_states: model.n_states,
        n_ctrl: model.n_ctrl,
        d_obs: model.d_obs,
        gamma: model.gamma,
        transition: model.transition.clone(),
        obs_table: model.obs_table.clone(),
        reward: model.reward.clone(),
        cost_vec: model.cost_vec.clone(),
        terminal: model.terminal.clone(),
        init: init.map(|b| b.to_vec()),
    };
    let text = toml::to_string(&file)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    std::fs::write(path, text).map_err(|e| Error::file(path.to_path_buf(), e))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path.to_path_buf(), e))?;
    let file: ModelFile = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let model = TabularOcmdp::new(
        file.n_states,
        file.n_ctrl,
        file.d_obs,
        file.transition,
        file.obs_table,
        file.reward,
        file.cost_vec,
        file.gamma,
        file.terminal,
    )?;
    if let Some(init) = &file.init {
        if init.len() != model.n_states {
            return Err(Error::Model(format!(
                "init distribution has {} entries, model has {} states",
                init.len(),
                model.n_states
            )));
        }
    }
    Ok(LoadedModel { model, init: file.init })
}

/// 17 significant digits: enough for f64 to round-trip through decimal.
fn fmt_value(v: f64) -> String {
    format!("{v:.16e}")
}

/// CSV layout: header `state,q0..q{A-1}`, one row per state.
pub fn write_qtable_csv<W: std::io::Write>(writer: W, q: &QTable) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    let mut header = vec!["state".to_string()];
    header.extend((0..q.n_actions).map(|a| format!("q{a}")));
    out.write_record(&header).map_err(csv_err)?;
    for s in 0..q.n_states {
        let mut row = vec![s.to_string()];
        row.extend((0..q.n_actions).map(|a| fmt_value(q.get(s, a))));
        out.write_record(&row).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_qtable_csv<R: std::io::Read>(reader: R) -> Result<QTable> {
    let mut rd = csv::Reader::from_reader(reader);
    let n_actions = rd.headers().map_err(csv_err)?.len().saturating_sub(1);
    if n_actions == 0 {
        return Err(Error::Config("Q table CSV has no action columns".into()));
    }
    let mut values = Vec::new();
    let mut n_states = 0;
    for record in rd.records() {
        let record = record.map_err(csv_err)?;
        if record.len() != n_actions + 1 {
            return Err(Error::Config(format!(
                "Q table row {n_states} has {} fields, expected {}",
                record.len(),
                n_actions + 1
            )));
        }
        for field in record.iter().skip(1) {
            values.push(
                field
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("bad Q value {field:?}: {e}")))?,
            );
        }
        n_states += 1;
    }
    Ok(QTable { values, n_states, n_actions })
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{random_model, random_qtable};
    use crate::rng::stream_rng;

    #[test]
    fn model_roundtrip_is_exact() {
        let model = random_model(4, 2, 1, 0.97, 5);
        let dir = std::env::temp_dir().join(format!("ocmdp-io-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.toml");
        save_model(&path, &model, Some(&[0.25, 0.25, 0.25, 0.25])).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.model, model);
        assert_eq!(loaded.init, Some(vec![0.25; 4]));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn qtable_roundtrip_is_exact() {
        let model = random_model(3, 2, 2, 0.9, 8);
        let q = random_qtable(&model, 123.456, &mut stream_rng(9, 0));
        let mut buf = Vec::new();
        write_qtable_csv(&mut buf, &q).unwrap();
        let back = read_qtable_csv(buf.as_slice()).unwrap();
        assert_eq!(q, back);
    }

    #[test]
    fn unknown_model_key_is_rejected() {
        let dir = std::env::temp_dir().join(format!("ocmdp-io-test2-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.toml");
        std::fs::write(
            &path,
            "n_states = 1\nn_ctrl = 1\nd_obs = 0\ngamma = 0.9\ntransition = [1.0]\n\
             obs_table = []\nreward = [0.0]\ncost_vec = []\nterminal = [false]\nbogus = 3\n",
        )
        .unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }
}
