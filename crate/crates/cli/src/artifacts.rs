//! Output directories, manifests and plot/table files.

use std::fs;
use std::path::{Path, PathBuf};

use latentmine::{Error, Result, Tensor};
use sha2::{Digest, Sha256};

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

/// Hash of a file's bytes with a git blob header, using SHA-256.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| io(path, e))?;
    Ok(blob_hash(&bytes))
}

/// A run directory that only appears under its final name once the run
/// succeeds. Failed runs are moved to `<name>.failed`.
pub struct OutDir {
    target: PathBuf,
    staging: PathBuf,
    files: Vec<String>,
}

impl OutDir {
    pub fn create(target: &Path) -> Result<Self> {
        if target.exists() {
            return Err(io(
                target,
                std::io::Error::new(std::io::ErrorKind::AlreadyExists, "output directory already exists"),
            ));
        }
        let name = target
            .file_name()
            .ok_or_else(|| Error::Usage(format!("bad output path {}", target.display())))?
            .to_string_lossy()
            .into_owned();
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| io(&parent, e))?;
        let staging = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| io(&staging, e))?;
        }
        fs::create_dir(&staging).map_err(|e| io(&staging, e))?;
        Ok(Self { target: target.to_path_buf(), staging, files: Vec::new() })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.staging.join(name);
        fs::write(&path, bytes).map_err(|e| io(&path, e))?;
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        Ok(())
    }

    /// `(name, hash)` for every file written so far, sorted by name.
    pub fn hashes(&self) -> Result<Vec<(String, String)>> {
        let mut names = self.files.clone();
        names.sort();
        names
            .into_iter()
            .map(|n| {
                let h = file_hash(&self.staging.join(&n))?;
                Ok((n, h))
            })
            .collect()
    }

    pub fn commit(self) -> Result<PathBuf> {
        fs::rename(&self.staging, &self.target).map_err(|e| io(&self.target, e))?;
        Ok(self.target)
    }

    pub fn abandon(self) -> Option<PathBuf> {
        let mut failed = self.target.clone().into_os_string();
        failed.push(".failed");
        let failed = PathBuf::from(failed);
        if failed.exists() {
            fs::remove_dir_all(&failed).ok()?;
        }
        fs::rename(&self.staging, &failed).ok()?;
        Some(failed)
    }
}

pub fn csv_header(prefix: &str, cols: usize) -> String {
    (0..cols).map(|c| format!("{prefix}{c}")).collect::<Vec<_>>().join(",")
}

/// Rows of `t` as CSV with a header of `x0, x1, ...`.
pub fn points_csv(t: &Tensor, prefix: &str) -> String {
    let mut s = csv_header(prefix, t.cols());
    s.push('\n');
    for r in 0..t.rows() {
        let row: Vec<String> = t.row(r).iter().map(|v| v.to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Standalone SVG scatter of 2-D points, optionally overlaid with
/// reference points in a second color.
pub fn scatter_svg(points: &Tensor, reference: Option<&Tensor>) -> String {
    const SIZE: f64 = 480.0;
    const PAD: f64 = 24.0;
    let all: Vec<&[f64]> = (0..points.rows())
        .map(|r| points.row(r))
        .chain(reference.into_iter().flat_map(|t| (0..t.rows()).map(move |r| t.row(r))))
        .collect();
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &all {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
    let px = |p: &[f64]| {
        (
            PAD + (p[0] - lo[0]) / span * (SIZE - 2.0 * PAD),
            SIZE - PAD - (p[1] - lo[1]) / span * (SIZE - 2.0 * PAD),
        )
    };
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    if let Some(t) = reference {
        s.push_str("<g fill=\"#d62728\" fill-opacity=\"0.6\">\n");
        for r in 0..t.rows() {
            let (x, y) = px(t.row(r));
            s.push_str(&format!("<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"2.5\"/>\n"));
        }
        s.push_str("</g>\n");
    }
    s.push_str("<g fill=\"#1f77b4\" fill-opacity=\"0.5\">\n");
    for r in 0..points.rows() {
        let (x, y) = px(points.row(r));
        s.push_str(&format!("<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"1.5\"/>\n"));
    }
    s.push_str("</g>\n</svg>\n");
    s
}
