use std::fs;
use std::path::{Path, PathBuf};

use super::{ClassData, Dataset, Split};
use crate::error::{Error, Result};

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    out.sort();
    Ok(out)
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

/// Parses a binary (P5) 8-bit PGM, scaling pixels to `[0, 1]`.
pub(crate) fn parse_pgm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let mut pos = 0;
    if header_token(bytes, &mut pos) != Some(b"P5") {
        return Err(Error::format(path, "missing P5 magic"));
    }
    let mut num = |what: &str| -> Result<usize> {
        header_token(bytes, &mut pos)
            .and_then(|t| std::str::from_utf8(t).ok())
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::format(path, format!("bad {what} in header")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::format(path, "zero image dimension"));
    }
    if !(1..=255).contains(&maxval) {
        return Err(Error::format(path, format!("unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let n = width * height;
    if bytes.len() < start + n {
        return Err(Error::format(path, format!("raster has {} bytes, expected {n}", bytes.len().saturating_sub(start))));
    }
    let scale = maxval as f64;
    let px = bytes[start..start + n].iter().map(|&b| (b as f64 / scale).min(1.0)).collect();
    Ok((height, width, px))
}

pub(crate) fn parse_csv_row(text: &str, path: &Path) -> Result<Vec<f64>> {
    let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let values: Vec<f64> = line
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::format(path, format!("bad number: {e}")))?;
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "row must contain finite numbers"));
    }
    Ok(values)
}

/// Loads `root/{train,val,test}/<class>/<example>.(pgm|csv)`.
///
/// Classes are numbered in split order, then by directory name; examples are
/// read in file-name order. Missing split directories yield empty splits.
pub fn load_image_dataset(root: impl AsRef<Path>) -> Result<Dataset<f64>> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::format(root, "dataset root is not a directory"));
    }
    let mut shape: Option<Vec<usize>> = None;
    let mut classes = Vec::new();
    for split in Split::ALL {
        let dir = root.join(split.as_str());
        if !dir.is_dir() {
            continue;
        }
        for class_dir in sorted_entries(&dir)? {
            if !class_dir.is_dir() {
                continue;
            }
            let name = class_dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let mut examples = Vec::new();
            for file in sorted_entries(&class_dir)? {
                let ext = file.extension().and_then(|e| e.to_str()).unwrap_or("");
                let (s, values) = match ext {
                    "pgm" => {
                        let (h, w, px) = parse_pgm(&fs::read(&file)?, &file)?;
                        (vec![1, h, w], px)
                    }
                    "csv" => {
                        let v = parse_csv_row(&fs::read_to_string(&file)?, &file)?;
                        (vec![v.len()], v)
                    }
                    _ => continue,
                };
                match &shape {
                    None => shape = Some(s),
                    Some(expected) if *expected != s => {
                        return Err(Error::format(
                            &file,
                            format!("example shape {s:?} differs from {expected:?}"),
                        ))
                    }
                    Some(_) => {}
                }
                examples.push(values);
            }
            if examples.is_empty() {
                return Err(Error::Capacity(format!("class directory {} is empty", class_dir.display())));
            }
            classes.push(ClassData { name, split, examples });
        }
    }
    let shape = shape.ok_or_else(|| Error::Capacity(format!("no examples under {}", root.display())))?;
    Dataset::new(shape, classes)
}

/// Writes a dataset as one CSV file per example in the layout read by
/// [`load_image_dataset`]. Values use the shortest round-trip representation.
pub fn write_csv_dataset(d: &Dataset<f64>, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    for class in d.classes() {
        let dir = root.join(class.split.as_str()).join(&class.name);
        fs::create_dir_all(&dir)?;
        for (i, ex) in class.examples.iter().enumerate() {
            let row: Vec<String> = ex.iter().map(|v| format!("{v:?}")).collect();
            fs::write(dir.join(format!("{i:05}.csv")), row.join(",") + "\n")?;
        }
    }
    Ok(())
}
