//! Drawing load groups from a trained generator.
//!
//! Generated images get the temperature channel of a real window (the
//! "temperature bank" recorded at training time) before decoding, unless
//! `free_temperature` is set. The bank lives among the generator's buffers,
//! so it travels with checkpoints.

use chrono::DateTime;
use rand::Rng as _;

use super::{GanError, GanModel, Mode, Result};
use crate::autodiff::Array;
use crate::codec::{self, to_signed, EncodedImage, EncodingLevels};
use crate::dataio::{Label, LoadGroup, Provenance, SampleSet};
use crate::seed;

const BANK_TEMPERATURE: &str = "bank.temperature";
const BANK_START: &str = "bank.start";
const BANK_CADENCE: &str = "bank.cadence";
const CHUNK: usize = 64;

/// Decoding counters of a sampling run.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SampleReport {
    /// Entries decoded from farther than the off-curve threshold.
    pub off_curve: usize,
    pub max_distance: f64,
}

impl GanModel {
    /// Records the temperature series and start times of `groups`.
    pub fn set_temperature_bank(&mut self, groups: &SampleSet) -> Result<()> {
        let m = self.config.m;
        let mut temps = Vec::new();
        let mut starts = Vec::new();
        let mut cadence = 15.0;
        for g in &groups.groups {
            if g.m != m {
                return Err(GanError::Config(format!("group {} has M={}, model expects {m}", g.id, g.m)));
            }
            temps.extend_from_slice(&g.temperature);
            starts.push(g.start.and_utc().timestamp() as f64);
            cadence = g.cadence_min as f64;
        }
        let k = starts.len();
        self.gen_params.insert_buffer(BANK_TEMPERATURE, Array::new(vec![k, m], temps)?);
        self.gen_params.insert_buffer(BANK_START, Array::from_vec(starts));
        self.gen_params.insert_buffer(BANK_CADENCE, Array::scalar(cadence));
        Ok(())
    }

    fn bank(&self) -> Result<(&Array, &Array, u32)> {
        let missing = || GanError::Config("no temperature bank recorded; train the model first".into());
        let t = self.gen_params.buffer(BANK_TEMPERATURE).ok_or_else(missing)?;
        let s = self.gen_params.buffer(BANK_START).ok_or_else(missing)?;
        let c = self.gen_params.buffer(BANK_CADENCE).ok_or_else(missing)?;
        if s.is_empty() {
            return Err(missing());
        }
        Ok((t, s, c.item() as u32))
    }

    /// Draws `count` groups. Multi mode decodes one image per group; single
    /// mode stacks N independently drawn profiles.
    pub fn sample_groups(&self, count: usize, seed_value: u64, levels: &EncodingLevels) -> Result<(SampleSet, SampleReport)> {
        let mut set = SampleSet::new();
        let mut report = SampleReport::default();
        if count == 0 {
            return Ok((set, report));
        }
        let (bank_t, bank_s, cadence) = self.bank()?;
        let (m, n) = (self.config.m, self.config.n);
        let width = self.config.width();
        let per_group = if self.config.mode == Mode::Single { n } else { 1 };
        let mut rng = seed::rng_for(seed_value, "gan/sample");
        let rows: Vec<usize> = (0..count).map(|_| rng.random_range(0..bank_s.len())).collect();
        let mut images = Vec::with_capacity(count * per_group);
        let total = count * per_group;
        while images.len() < total {
            let k = CHUNK.min(total - images.len());
            let z = self.sample_latent(k, &mut rng);
            images.extend(self.generate(&z)?.unstack());
        }
        for (i, &row) in rows.iter().enumerate() {
            let temperature = bank_t.data()[row * m..(row + 1) * m].to_vec();
            let t_enc: Vec<f64> = temperature.iter().map(|t| to_signed(t.clamp(0.0, levels.t_max) / levels.t_max)).collect();
            let mut columns = Vec::with_capacity(n);
            let mut decoded_temp = vec![0.0; m];
            for img in &images[i * per_group..(i + 1) * per_group] {
                let mut data = img.data().to_vec();
                if !self.config.free_temperature {
                    let plane = m * width;
                    for r in 0..m {
                        data[3 * plane + r * width..3 * plane + (r + 1) * width].fill(t_enc[r]);
                    }
                }
                let image = EncodedImage::new(m, width, levels.l3, data)?;
                let d = codec::decode(&image, levels);
                report.off_curve += d.off_curve;
                report.max_distance = report.max_distance.max(d.max_distance);
                for j in 0..width {
                    columns.push((0..m).map(|r| d.kw[r * width + j]).collect::<Vec<f64>>());
                }
                for (acc, t) in decoded_temp.iter_mut().zip(&d.temperature) {
                    *acc += t / per_group as f64;
                }
            }
            let start = DateTime::from_timestamp(bank_s.data()[row] as i64, 0)
                .ok_or_else(|| GanError::Config("bad bank timestamp".into()))?
                .naive_utc();
            let refs: Vec<&[f64]> = columns.iter().map(Vec::as_slice).collect();
            let temperature = if self.config.free_temperature { decoded_temp } else { temperature };
            let group = LoadGroup::from_columns(format!("gen-{:08x}-{i:05}", seed_value as u32), start, cadence, &refs, temperature, Provenance::Generated, Vec::new())?;
            set.push(group, Label::Unlabeled);
        }
        if report.off_curve > 0 {
            log::warn!("{} generated entries decoded far from the color curve (max distance {:.3})", report.off_curve, report.max_distance);
        }
        Ok((set, report))
    }
}
