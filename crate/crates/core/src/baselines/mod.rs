//! Comparison channel selectors: mutual-information forward selection on
//! band-power features and least-squares utility backward elimination.

pub mod ica;
pub mod mi;
pub mod spectral;
pub mod utility;

use std::path::Path;

use crate::error::{Error, Result};

pub use ica::{fastica, Ica, IcaOptions, Whitening};
pub use mi::{ica_entropy, joint_mi, knn_entropy, mi_forward_select};
pub use spectral::{band_power, default_bands, BandPowerFeatures};
pub use utility::{
    channel_utility, ls_fit, utilities, utility_backward_eliminate, LsProblem,
};

/// Channels ordered best first, with the score that placed each one.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRanking {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

impl ChannelRanking {
    pub fn new(indices: Vec<usize>, scores: Vec<f64>) -> Result<Self> {
        if indices.len() != scores.len() {
            return Err(Error::shape(
                "ChannelRanking",
                format!("{} indices vs {} scores", indices.len(), scores.len()),
            ));
        }
        let mut sorted = indices.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput(format!("duplicate channels in ranking {indices:?}")));
        }
        Ok(Self { indices, scores })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// The best `k` channels.
    pub fn top(&self, k: usize) -> &[usize] {
        &self.indices[..k.min(self.indices.len())]
    }

    /// CSV with header `rank,channel_index,score`; ranks start at 1.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["rank", "channel_index", "score"])?;
        for (r, (c, s)) in self.indices.iter().zip(&self.scores).enumerate() {
            w.write_record(&[(r + 1).to_string(), c.to_string(), s.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}
