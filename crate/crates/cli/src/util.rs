use std::io;
use std::path::{Path, PathBuf};

/// First line of every text output.
pub fn config_header(hash: &str) -> String {
    format!("# config {hash}\n")
}

/// The hash named by a `# config <hash>` first line, if any.
pub fn read_config_header(text: &str) -> Option<&str> {
    text.lines().next()?.strip_prefix("# config ").map(str::trim)
}

/// Atomically replaces `path` unless it already holds exactly `bytes`, so
/// unchanged artifacts keep their modification time.
pub fn write_if_changed(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Ok(existing) = std::fs::read(path) {
        if existing == bytes {
            return Ok(());
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    ttasv::fsutil::atomic_write(path, bytes)
}

pub fn walk_files(dir: &Path, out: &mut Vec<PathBuf>) -> io::Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if e.file_type()?.is_dir() {
            walk_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// WAV files under `dir` as `(id relative to dir, path)`, sorted by id.
pub fn wav_files(dir: &Path) -> io::Result<Vec<(String, PathBuf)>> {
    let mut files = Vec::new();
    walk_files(dir, &mut files)?;
    Ok(files
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .filter_map(|p| {
            let id = p.strip_prefix(dir).ok()?.to_string_lossy().replace('\\', "/");
            Some((id, p))
        })
        .collect())
}
