//! Output directories whose contents are removed again if the command
//! fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use leafnet::checkpoint::{save_checkpoint, Checkpoint};
use leafnet::train::History;

use crate::error::{CliResult, IoContext};
use crate::plot::curves_svg;

pub const HISTORY: &str = "history.csv";
pub const BEST: &str = "best.ckpt";
pub const FINAL: &str = "final.ckpt";
pub const MANIFEST: &str = "manifest.json";
pub const CURVES: &str = "curves.svg";

/// Tracks what a command created and deletes it on drop unless
/// [`Outputs::commit`] was called.
#[derive(Debug)]
pub struct Outputs {
    root: PathBuf,
    created: Mutex<Vec<PathBuf>>,
    committed: bool,
}

impl Outputs {
    /// Creates `root` (and missing parents) for writing.
    pub fn create(root: &Path) -> CliResult<Self> {
        let out = Outputs {
            root: root.to_path_buf(),
            created: Mutex::new(Vec::new()),
            committed: false,
        };
        out.dir(root)?;
        Ok(out)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn track(&self, path: PathBuf) {
        self.created.lock().expect("output list lock").push(path);
    }

    /// Creates a directory, remembering the outermost one that was new.
    pub fn dir(&self, path: &Path) -> CliResult<()> {
        let first_new = path.ancestors().filter(|a| !a.as_os_str().is_empty() && !a.exists()).last();
        if let Some(first_new) = first_new {
            let first_new = first_new.to_path_buf();
            fs::create_dir_all(path).at(path)?;
            self.track(first_new);
        } else if !path.is_dir() {
            fs::create_dir_all(path).at(path)?;
        }
        Ok(())
    }

    /// Registers a file about to be written.
    pub fn file(&self, name: impl AsRef<Path>) -> PathBuf {
        let p = self.root.join(name);
        self.track(p.clone());
        p
    }

    pub fn write(&self, name: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let p = self.file(name);
        fs::write(&p, contents).at(&p)?;
        Ok(p)
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        let created = std::mem::take(self.created.get_mut().expect("output list lock"));
        for p in created.into_iter().rev() {
            let _ = if p.is_dir() {
                fs::remove_dir_all(&p)
            } else {
                fs::remove_file(&p)
            };
        }
    }
}

/// Writes history, both checkpoints, the manifest and the curves into the
/// subdirectory `sub` of the output root (`""` for the root itself).
pub fn write_run(
    out: &Outputs,
    sub: impl AsRef<Path>,
    history: &History,
    best: &Checkpoint,
    last: &Checkpoint,
) -> CliResult<()> {
    let sub = sub.as_ref();
    out.dir(&out.root().join(sub))?;
    history.write_csv(&out.file(sub.join(HISTORY)))?;
    save_checkpoint(best, &out.file(sub.join(BEST)))?;
    save_checkpoint(last, &out.file(sub.join(FINAL)))?;
    out.write(sub.join(MANIFEST), last.manifest.to_json()?)?;
    out.write(sub.join(CURVES), curves_svg(history))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncommitted_outputs_are_removed() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("a/b");
        {
            let out = Outputs::create(&root).unwrap();
            out.write("x.txt", "1").unwrap();
            out.dir(&root.join("cell")).unwrap();
        }
        assert!(!tmp.path().join("a").exists());

        fs::create_dir(tmp.path().join("keep")).unwrap();
        fs::write(tmp.path().join("keep/old.txt"), "old").unwrap();
        {
            let out = Outputs::create(&tmp.path().join("keep")).unwrap();
            out.write("new.txt", "1").unwrap();
        }
        assert!(tmp.path().join("keep/old.txt").exists());
        assert!(!tmp.path().join("keep/new.txt").exists());

        let out = Outputs::create(&tmp.path().join("kept")).unwrap();
        out.write("y.txt", "1").unwrap();
        out.commit();
        assert!(tmp.path().join("kept/y.txt").exists());
    }
}
