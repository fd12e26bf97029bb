use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Electrodes of the 32-channel wireless cap; the two mastoids (A1, A2)
/// are dropped by the default montage.
pub const THU_EP_SOURCE_CHANNELS: [&str; 32] = [
    "Fp1", "Fp2", "Fz", "F3", "F4", "F7", "F8", "FC1", "FC2", "FC5", "FC6", "Cz", "C3", "C4", "T7", "T8", "A1", "A2",
    "CP1", "CP2", "CP5", "CP6", "Pz", "P3", "P4", "P7", "P8", "PO3", "PO4", "Oz", "O1", "O2",
];

/// Default bipolar pairs. Montages 21 and 28 (1-based) mirror montages 20
/// and 26, so their signals are sign-flipped copies.
const THU_EP_PAIRS: &str = "\
# positive,negative
Fp1,F3
F3,C3
C3,P3
P3,O1
Fp2,F4
F4,C4
C4,P4
P4,O2
Fp1,F7
F7,T7
T7,P7
P7,O1
Fp2,F8
F8,T8
T8,P8
P8,O2
Fz,Cz
Cz,Pz
Pz,Oz
FC1,FC2
FC2,FC1
FC5,FC1
FC6,FC2
CP5,CP1
CP6,CP2
CP1,CP2
PO3,PO4
CP2,CP1
PO3,O1
PO4,O2
";

/// 32-channel 10-20 layout in the order the public recordings use.
pub const DEAP_SOURCE_CHANNELS: [&str; 32] = [
    "Fp1", "AF3", "F3", "F7", "FC5", "FC1", "C3", "T7", "CP5", "CP1", "P3", "P7", "PO3", "O1", "Oz", "Pz", "Fp2", "AF4",
    "Fz", "F4", "F8", "FC6", "FC2", "Cz", "C4", "T8", "CP6", "CP2", "P4", "P8", "PO4", "O2",
];

/// Default 28-channel selection: everything except the midline
/// electrodes, left hemisphere then the mirrored right hemisphere.
const DEAP_SELECTION: &str = "\
Fp1
AF3
F3
F7
FC5
FC1
C3
T7
CP5
CP1
P3
P7
PO3
O1
Fp2
AF4
F4
F8
FC6
FC2
C4
T8
CP6
CP2
P4
P8
PO4
O2
";

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn index_of(names: &[String], name: &str) -> Result<usize> {
    names
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| Error::UnknownChannel(name.to_string()))
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Ordered bipolar pairs; output row `i` is `x[pos_i] - x[neg_i]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MontageSpec {
    pub pairs: Vec<(String, String)>,
}

impl MontageSpec {
    /// Parses one `positive,negative` pair per line; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in content_lines(text) {
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            match parts.as_slice() {
                [a, b] if !a.is_empty() && !b.is_empty() => pairs.push((a.to_string(), b.to_string())),
                _ => {
                    return Err(Error::Config(format!(
                        "montage line {n}: expected `positive,negative`, got `{line}`"
                    )))
                }
            }
        }
        if pairs.is_empty() {
            return Err(Error::Config("montage lists no pairs".into()));
        }
        Ok(Self { pairs })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    pub fn to_text(&self) -> String {
        self.pairs.iter().map(|(a, b)| format!("{a},{b}\n")).collect()
    }

    pub fn thu_ep_default() -> Self {
        Self::parse(THU_EP_PAIRS).expect("built-in montage parses")
    }

    pub fn output_names(&self) -> Vec<String> {
        self.pairs.iter().map(|(a, b)| format!("{a}-{b}")).collect()
    }

    pub fn validate(&self, source: &[String]) -> Result<()> {
        for (a, b) in &self.pairs {
            index_of(source, a)?;
            index_of(source, b)?;
        }
        Ok(())
    }

    /// Re-references a `(channels, samples)` array whose rows are named by `source`.
    pub fn apply(&self, x: &Tensor, source: &[String]) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 2 || s[0] != source.len() {
            return Err(Error::dim(format!(
                "montage input {s:?} does not match {} channel names",
                source.len()
            )));
        }
        let t = s[1];
        let mut out = Vec::with_capacity(self.pairs.len() * t);
        for (a, b) in &self.pairs {
            let (ia, ib) = (index_of(source, a)?, index_of(source, b)?);
            let (ra, rb) = (&x.data()[ia * t..(ia + 1) * t], &x.data()[ib * t..(ib + 1) * t]);
            out.extend(ra.iter().zip(rb).map(|(p, q)| p - q));
        }
        Tensor::new(vec![self.pairs.len(), t], out)
    }
}

/// An ordered subset of channels, one name per line in its text form.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSelection {
    pub names: Vec<String>,
}

impl ChannelSelection {
    pub fn parse(text: &str) -> Result<Self> {
        let names: Vec<String> = content_lines(text).map(|(_, l)| l.to_string()).collect();
        if names.is_empty() {
            return Err(Error::Config("channel selection lists no channels".into()));
        }
        Ok(Self { names })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    pub fn to_text(&self) -> String {
        self.names.iter().map(|n| format!("{n}\n")).collect()
    }

    pub fn deap_default() -> Self {
        Self::parse(DEAP_SELECTION).expect("built-in selection parses")
    }

    pub fn apply(&self, x: &Tensor, source: &[String]) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 2 || s[0] != source.len() {
            return Err(Error::dim(format!(
                "channel selection input {s:?} does not match {} channel names",
                source.len()
            )));
        }
        let t = s[1];
        let mut out = Vec::with_capacity(self.names.len() * t);
        for n in &self.names {
            let i = index_of(source, n)?;
            out.extend_from_slice(&x.data()[i * t..(i + 1) * t]);
        }
        Tensor::new(vec![self.names.len(), t], out)
    }
}

pub fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}
