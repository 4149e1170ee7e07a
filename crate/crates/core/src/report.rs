//! CSV and JSON artifact emission. Every artifact embeds the config hash
//! and seed; accuracy columns use two decimals (table style), geometry and
//! loss columns six. Rows are written in deterministic order so identical
//! runs produce identical bytes.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;

pub fn fmt_pct(x: f64) -> String {
    format!("{x:.2}")
}

pub fn fmt_val(x: f64) -> String {
    format!("{x:.6}")
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        out.push_str(&row.join(","));
        out.push('\n');
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_bytes_deterministic() {
        let dir = std::env::temp_dir().join("cpt_report_test");
        let path = dir.join("t.csv");
        let rows = vec![
            vec!["a".into(), fmt_pct(12.345)],
            vec!["b".into(), fmt_pct(0.0)],
        ];
        write_csv(&path, &["name", "acc"], &rows).unwrap();
        let first = fs::read(&path).unwrap();
        write_csv(&path, &["name", "acc"], &rows).unwrap();
        assert_eq!(first, fs::read(&path).unwrap());
        assert_eq!(
            String::from_utf8(first).unwrap(),
            "name,acc\na,12.35\nb,0.00\n"
        );
    }
}
