//! Plain-text network checkpoints.
//!
//! ```text
//! mlp-checkpoint 1
//! output tanh
//! layer_sizes 4 64 64 2
//! params 4610
//! <one parameter per line, flat order, shortest round-trip decimal>
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{param_count, MlpNet, NnError, OutputActivation, ParamVector, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "mlp-checkpoint";

pub fn write_checkpoint<W: Write>(net: &MlpNet, mut w: W) -> Result<()> {
    writeln!(w, "{MAGIC} {CHECKPOINT_VERSION}")?;
    writeln!(w, "output {}", net.output_activation().name())?;
    let sizes: Vec<String> = net.layer_sizes().iter().map(|s| s.to_string()).collect();
    writeln!(w, "layer_sizes {}", sizes.join(" "))?;
    writeln!(w, "params {}", net.num_params())?;
    for p in net.to_params().0 {
        writeln!(w, "{p:?}")?;
    }
    Ok(())
}

fn bad(line: usize, message: impl Into<String>) -> NnError {
    NnError::Checkpoint {
        line,
        message: message.into(),
    }
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<MlpNet> {
    let mut lines = BufReader::new(r).lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((n, l)) => Ok((n, l?)),
            None => Err(bad(0, format!("unexpected end of file, expected {what}"))),
        }
    };

    let (n, header) = next("header")?;
    let version = header
        .strip_prefix(MAGIC)
        .map(str::trim)
        .ok_or_else(|| bad(n, "missing checkpoint magic"))?;
    if version != CHECKPOINT_VERSION.to_string() {
        return Err(bad(n, format!("unsupported version {version}")));
    }

    let (n, line) = next("output")?;
    let output = line
        .strip_prefix("output ")
        .and_then(OutputActivation::from_name)
        .ok_or_else(|| bad(n, format!("bad output line `{line}`")))?;

    let (n, line) = next("layer_sizes")?;
    let sizes = line
        .strip_prefix("layer_sizes ")
        .ok_or_else(|| bad(n, "expected layer_sizes"))?
        .split_whitespace()
        .map(|s| s.parse::<usize>().map_err(|e| bad(n, e.to_string())))
        .collect::<Result<Vec<_>>>()?;

    let (n, line) = next("params")?;
    let count: usize = line
        .strip_prefix("params ")
        .ok_or_else(|| bad(n, "expected params"))?
        .trim()
        .parse()
        .map_err(|e: std::num::ParseIntError| bad(n, e.to_string()))?;
    if count != param_count(&sizes) {
        return Err(bad(n, format!("params {count} inconsistent with layer sizes")));
    }

    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let (n, line) = next("parameter")?;
        params.push(line.trim().parse::<f64>().map_err(|e| bad(n, e.to_string()))?);
    }
    MlpNet::from_params(&sizes, output, &ParamVector(params))
}

pub fn save_checkpoint(net: &MlpNet, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(net, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<MlpNet> {
    read_checkpoint(File::open(path)?)
}
