use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One training-log row. Empty cells mean "not measured at this step".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss_g: Option<f64>,
    pub loss_c: Option<f64>,
    pub grad_norm_g: Option<f64>,
    pub eval_frechet: Option<f64>,
    pub eval_sync: Option<f64>,
    pub ema_active: bool,
}

impl StepRecord {
    pub fn new(step: usize) -> Self {
        Self {
            step,
            loss_g: None,
            loss_c: None,
            grad_norm_g: None,
            eval_frechet: None,
            eval_sync: None,
            ema_active: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    /// The stopping rule (not the step cap) ended training.
    pub converged: bool,
    pub hit_step_cap: bool,
    pub generator_steps: usize,
    pub critic_steps: usize,
    /// `(step, eval_frechet)` of the best evaluation seen.
    pub best: Option<(usize, f64)>,
    /// Final evaluation is worse than the best by more than the configured margin.
    pub peak_then_degrade: bool,
}

impl TrainLog {
    pub fn push(&mut self, r: StepRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if r.step < last.step {
                return Err(Error::invalid(format!(
                    "log step {} after step {}",
                    r.step, last.step
                )));
            }
        }
        if let Some(f) = r.eval_frechet {
            if self.best.is_none_or(|(_, b)| f < b) {
                self.best = Some((r.step, f));
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn evals(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.records
            .iter()
            .filter_map(|r| r.eval_frechet.map(|f| (r.step, f)))
    }

    pub fn last_eval(&self) -> Option<(usize, f64)> {
        self.evals().last()
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
        }
        if self.records.is_empty() {
            w.write_record([
                "step",
                "loss_g",
                "loss_c",
                "grad_norm_g",
                "eval_frechet",
                "eval_sync",
                "ema_active",
            ])
            .map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_records(input: impl Read) -> Result<Vec<StepRecord>> {
        csv::Reader::from_reader(input)
            .deserialize()
            .map(|r| r.map_err(|e| Error::Format(e.to_string())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tracks_best_and_rejects_backwards_steps() {
        let mut log = TrainLog::default();
        for (s, f) in [(0, 3.0), (10, 1.0), (20, 2.0)] {
            log.push(StepRecord {
                eval_frechet: Some(f),
                ..StepRecord::new(s)
            })
            .unwrap();
        }
        assert_eq!(log.best, Some((10, 1.0)));
        assert_eq!(log.last_eval(), Some((20, 2.0)));
        assert!(log.push(StepRecord::new(5)).is_err());
    }

    #[test]
    fn csv_roundtrip_with_empty_cells() {
        let mut log = TrainLog::default();
        log.push(StepRecord {
            loss_g: Some(0.5),
            ..StepRecord::new(0)
        })
        .unwrap();
        log.push(StepRecord {
            loss_c: Some(0.25),
            eval_frechet: Some(1.5),
            ema_active: true,
            ..StepRecord::new(1)
        })
        .unwrap();
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("step,loss_g,loss_c,grad_norm_g,eval_frechet,eval_sync,ema_active\n"));
        assert!(text.contains("0,0.5,,,,,false"));
        assert_eq!(TrainLog::read_records(&buf[..]).unwrap(), log.records);
    }

    #[test]
    fn empty_log_writes_header() {
        let mut buf = Vec::new();
        TrainLog::default().write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "step,loss_g,loss_c,grad_norm_g,eval_frechet,eval_sync,ema_active\n"
        );
    }
}
