//! Line-delimited JSON metric streams, one record per epoch.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};
use srtc::distill::DistillEpoch;
use srtc::expert::ExpertEpoch;

use crate::error::{IoContext, Result};

/// Sole writer of one metrics file. Every record is flushed as written so
/// an interrupted run stays inspectable.
pub struct MetricsWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).at(path)?;
        Ok(Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, record: &Value) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n").at(&self.path)?;
        self.out.flush().at(&self.path)
    }
}

pub fn expert_record(source: &str, e: &ExpertEpoch) -> Value {
    json!({
        "phase": "expert",
        "source": source,
        "epoch": e.epoch,
        "j_mae": e.j_mae,
        "j_mae_g": e.j_mae_g,
        "j_sim": e.j_sim,
        "adv": e.adv,
        "generator_loss": e.generator_loss,
        "critic_loss": e.critic_loss,
        "gradient_penalty": e.gradient_penalty,
    })
}

/// `run` labels the constraint set, e.g. `baseline` or `enhanced`.
pub fn distill_record(run: &str, e: &DistillEpoch) -> Value {
    let mut m = Map::new();
    m.insert("phase".into(), "distill".into());
    m.insert("run".into(), run.into());
    m.insert("epoch".into(), e.epoch.into());
    m.insert("j_overall".into(), e.j_overall.into());
    m.insert("j_mae".into(), e.terms.j_mae.into());
    m.insert("j_sim".into(), e.terms.j_sim.into());
    m.insert("j_mi".into(), e.terms.j_mi.into());
    m.insert("j_fi".into(), e.terms.j_fi.into());
    for (i, t) in e.terms.per_teacher.iter().enumerate() {
        m.insert(format!("teacher{i}.j_sim"), t.j_sim.into());
        m.insert(format!("teacher{i}.j_mi"), t.j_mi.into());
        m.insert(format!("teacher{i}.j_fi"), t.j_fi.into());
    }
    Value::Object(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_are_one_line_each() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut w = MetricsWriter::create(&path).unwrap();
        for epoch in 0..3 {
            let e = ExpertEpoch {
                epoch,
                j_mae: 1.5,
                ..Default::default()
            };
            w.write(&expert_record("a", &e)).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[2]["epoch"], 2);
        assert_eq!(lines[0]["phase"], "expert");
        assert_eq!(lines[0]["j_mae"], 1.5);
    }
}
