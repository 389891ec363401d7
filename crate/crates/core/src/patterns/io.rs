//! Text dumps of masks: CSV grids and plain (P2) PGM images.

use std::io::{self, Write};
use std::str::FromStr;

use super::AttentionMask;
use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskFormat {
    Csv,
    Pgm,
}

impl FromStr for MaskFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(MaskFormat::Csv),
            "pgm" => Ok(MaskFormat::Pgm),
            other => Err(Error::Config(format!("unsupported mask format '{other}'"))),
        }
    }
}

/// One line per query row, `1`/`0` per key column, comma separated.
pub fn write_csv<W: Write>(mask: &AttentionMask, mut out: W) -> io::Result<()> {
    for i in 0..mask.n() {
        let row: Vec<&str> = (0..mask.n()).map(|j| if mask.get(i, j) { "1" } else { "0" }).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// ASCII PGM with maxval 255; connected cells are white.
pub fn write_pgm<W: Write>(mask: &AttentionMask, mut out: W) -> io::Result<()> {
    let n = mask.n();
    writeln!(out, "P2")?;
    writeln!(out, "# attention mask, layer {}", mask.layer())?;
    writeln!(out, "{n} {n}")?;
    writeln!(out, "255")?;
    for i in 0..n {
        let row: Vec<&str> = (0..n).map(|j| if mask.get(i, j) { "255" } else { "0" }).collect();
        writeln!(out, "{}", row.join(" "))?;
    }
    Ok(())
}
