use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PairRow {
    pub text_a: String,
    pub text_b: String,
    pub gold: f64,
}

/// Text pairs with graded similarity or relatedness scores.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    pub name: String,
    pub rows: Vec<PairRow>,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Reads `text_a<TAB>text_b<TAB>score` lines. Blank lines are ignored. The
/// dataset is named after the file stem.
pub fn load_pairs(path: impl AsRef<Path>) -> Result<PairDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        let [a, b, score] = cols[..] else {
            return Err(parse_err(format!("expected 3 tab-separated columns, found {}", cols.len())));
        };
        let gold: f64 = score
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("score {score:?} is not a number")))?;
        if !gold.is_finite() {
            return Err(parse_err(format!("score {score:?} is not finite")));
        }
        rows.push(PairRow {
            text_a: a.to_string(),
            text_b: b.to_string(),
            gold,
        });
    }
    if rows.is_empty() {
        return Err(Error::Input(format!("{}: no pairs", path.display())));
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(PairDataset { name, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(".tsv").tempfile().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn single_row() {
        let d = load_pairs(file("cat\tdog\t7.35\n").path()).unwrap();
        assert_eq!(d.rows, vec![PairRow { text_a: "cat".into(), text_b: "dog".into(), gold: 7.35 }]);
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(matches!(load_pairs(file("").path()), Err(Error::Input(_))));
    }

    #[test]
    fn crlf_parses_like_lf() {
        let lf = load_pairs(file("a b\tc d\t1.5\ne\tf\t2\n").path()).unwrap();
        let crlf = load_pairs(file("a b\tc d\t1.5\r\ne\tf\t2\r\n").path()).unwrap();
        assert_eq!(lf.rows, crlf.rows);
    }

    #[test]
    fn bad_rows_cite_their_line() {
        assert!(matches!(load_pairs(file("a\tb\t1\na\tb\n").path()), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(load_pairs(file("a\tb\thigh\n").path()), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(load_pairs(file("a\tb\tNaN\n").path()), Err(Error::Parse { line: 1, .. })));
    }
}
