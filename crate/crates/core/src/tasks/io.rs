use std::fmt::Write as _;
use std::path::Path;

use super::Pair;
use crate::error::{Error, Result};

/// One pair per line: space-separated source ids, a tab, target ids.
pub fn export_tsv(pairs: &[Pair]) -> String {
    let mut out = String::new();
    for p in pairs {
        let join = |ids: &[usize]| ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        writeln!(out, "{}\t{}", join(&p.src), join(&p.tgt)).expect("writing to a String cannot fail");
    }
    out
}

pub fn import_tsv(text: &str) -> Result<Vec<Pair>> {
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(n, line)| {
            let (src, tgt) = line
                .split_once('\t')
                .ok_or_else(|| Error::Parse(format!("line {}: missing tab separator", n + 1)))?;
            let ids = |field: &str| {
                field
                    .split_whitespace()
                    .map(|tok| {
                        tok.parse::<usize>()
                            .map_err(|_| Error::Parse(format!("line {}: bad token id `{tok}`", n + 1)))
                    })
                    .collect::<Result<Vec<_>>>()
            };
            Ok(Pair {
                src: ids(src)?,
                tgt: ids(tgt)?,
            })
        })
        .collect()
}

pub fn write_tsv(path: impl AsRef<Path>, pairs: &[Pair]) -> Result<()> {
    std::fs::write(path, export_tsv(pairs))?;
    Ok(())
}

pub fn read_tsv(path: impl AsRef<Path>) -> Result<Vec<Pair>> {
    import_tsv(&std::fs::read_to_string(path)?)
}
