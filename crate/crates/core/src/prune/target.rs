use std::collections::BTreeMap;

use crate::model::ModelConfig;
use crate::{Error, Result};

/// What happens to the species embedding after slicing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EmbeddingPolicy {
    /// Keep the sliced columns of the source embedding.
    Inherit,
    /// Draw a fresh embedding at the target width.
    #[default]
    Reinit,
}

/// Desired architecture: channel counts per (layer, order) plus optional
/// depth and surgery policies. Unlisted `(layer, l)` pairs keep their count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TargetSpec {
    pub counts: BTreeMap<(usize, usize), usize>,
    pub depth: Option<usize>,
    pub embedding: EmbeddingPolicy,
    pub readout_substitute: bool,
}

impl TargetSpec {
    /// Same channel counts as `config` at every order up to `l_max`; higher
    /// orders dropped.
    pub fn truncate_orders(config: &ModelConfig, l_max: usize) -> Self {
        let mut counts = BTreeMap::new();
        for (t, lay) in config.layers.iter().enumerate() {
            for (l, &k) in lay.mults().iter().enumerate() {
                counts.insert((t, l), if l <= l_max { k } else { 0 });
            }
        }
        Self { counts, ..Self::default() }
    }

    /// Lines `layer l count`, `depth T`, `embedding inherit|reinit`,
    /// `readout-substitute on|off`; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = TargetSpec::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line: i + 1, msg };
            let f: Vec<&str> = line.split_whitespace().collect();
            let int = |s: &str| s.parse::<usize>().map_err(|e| err(format!("{s:?}: {e}")));
            match f.as_slice() {
                ["depth", v] => spec.depth = Some(int(v)?),
                ["embedding", "inherit"] => spec.embedding = EmbeddingPolicy::Inherit,
                ["embedding", "reinit"] => spec.embedding = EmbeddingPolicy::Reinit,
                ["readout-substitute", "on"] => spec.readout_substitute = true,
                ["readout-substitute", "off"] => spec.readout_substitute = false,
                [t, l, n] => {
                    spec.counts.insert((int(t)?, int(l)?), int(n)?);
                }
                _ => return Err(err(format!("unrecognised line {line:?}"))),
            }
        }
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# layer l count\n");
        for (&(t, l), &n) in &self.counts {
            s.push_str(&format!("{t} {l} {n}\n"));
        }
        if let Some(d) = self.depth {
            s.push_str(&format!("depth {d}\n"));
        }
        s.push_str(match self.embedding {
            EmbeddingPolicy::Inherit => "embedding inherit\n",
            EmbeddingPolicy::Reinit => "embedding reinit\n",
        });
        s.push_str(if self.readout_substitute { "readout-substitute on\n" } else { "readout-substitute off\n" });
        s
    }

    /// Full per-layer channel counts for `config`, validated.
    pub fn resolve(&self, config: &ModelConfig) -> Result<Vec<Vec<usize>>> {
        let n_layers = config.layers.len();
        let mut counts: Vec<Vec<usize>> = config.layers.iter().map(|l| l.mults().to_vec()).collect();
        for (&(t, l), &n) in &self.counts {
            if t >= n_layers {
                return Err(Error::Infeasible(format!("layer {t} does not exist (model has {})", n_layers - 1)));
            }
            let have = config.layers[t].mult(l);
            if n > have {
                return Err(Error::Infeasible(format!("layer {t} order {l}: target {n} exceeds source {have}")));
            }
            if let Some(c) = counts[t].get_mut(l) {
                *c = n;
            }
        }
        let last = self.depth.unwrap_or(n_layers - 1);
        if last == 0 || last >= n_layers {
            return Err(Error::Infeasible(format!("depth {last} outside 1..={}", n_layers - 1)));
        }
        if counts[last][0] == 0 {
            return Err(Error::Infeasible(format!("layer {last} keeps no scalars for the readout")));
        }
        if let Some(t) = (0..last).find(|&t| counts[t].iter().all(|&n| n == 0)) {
            return Err(Error::Infeasible(format!("layer {t} keeps no channels, so layer {} has no input", t + 1)));
        }
        Ok(counts)
    }
}
