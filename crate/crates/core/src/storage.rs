//! Byte-level backends for a job directory.
//!
//! The coordination protocol only needs a handful of primitives: whole-file
//! reads, atomic replace, exclusive create, remove, rename and append. The
//! filesystem backend maps them onto ordinary files on a (possibly shared)
//! directory; the in-memory backend is used by the simulator and by tests
//! that need deterministic interleavings.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

pub trait Storage: Send + Sync + fmt::Debug {
    /// Human-readable location used in error messages.
    fn location(&self) -> String;

    /// Whole-file read. `Ok(None)` when the file does not exist.
    fn read(&self, name: &str) -> io::Result<Option<Vec<u8>>>;

    fn exists(&self, name: &str) -> io::Result<bool>;

    /// Replaces `name` so that readers observe either the old or the new
    /// contents, never a mix.
    fn write_atomic(&self, name: &str, data: &[u8]) -> io::Result<()>;

    /// Creates `name` with `data` only if it does not exist. The file
    /// appears with its full contents or not at all.
    fn create_new(&self, name: &str, data: &[u8]) -> io::Result<bool>;

    /// Removes `name`; returns whether it existed.
    fn remove(&self, name: &str) -> io::Result<bool>;

    /// Atomic rename. Fails with `NotFound` if `from` is absent.
    fn rename(&self, from: &str, to: &str) -> io::Result<()>;

    fn append(&self, name: &str, data: &[u8]) -> io::Result<()>;

    /// Names of the regular files in the directory, sorted.
    fn list(&self) -> io::Result<Vec<String>>;
}

/// A directory on a local or network filesystem.
#[derive(Debug, Clone)]
pub struct FsStorage {
    root: PathBuf,
}

impl FsStorage {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn check_root(&self) -> io::Result<()> {
        let meta = fs::metadata(&self.root)?;
        if meta.is_dir() {
            Ok(())
        } else {
            Err(io::Error::new(ErrorKind::NotADirectory, "not a directory"))
        }
    }

    fn temp_in_root(&self, name: &str, data: &[u8]) -> io::Result<tempfile::NamedTempFile> {
        let mut tmp = tempfile::Builder::new()
            .prefix(&format!(".{name}."))
            .suffix(".tmp")
            .tempfile_in(&self.root)?;
        tmp.write_all(data)?;
        tmp.as_file().sync_all()?;
        Ok(tmp)
    }
}

impl Storage for FsStorage {
    fn location(&self) -> String {
        self.root.display().to_string()
    }

    fn read(&self, name: &str) -> io::Result<Option<Vec<u8>>> {
        match fs::read(self.path(name)) {
            Ok(bytes) => Ok(Some(bytes)),
            Err(e) if e.kind() == ErrorKind::NotFound => {
                self.check_root()?;
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    fn exists(&self, name: &str) -> io::Result<bool> {
        match fs::metadata(self.path(name)) {
            Ok(_) => Ok(true),
            Err(e) if e.kind() == ErrorKind::NotFound => {
                // An absent share is an error, not a missing file.
                self.check_root()?;
                Ok(false)
            }
            Err(e) => Err(e),
        }
    }

    fn write_atomic(&self, name: &str, data: &[u8]) -> io::Result<()> {
        let tmp = self.temp_in_root(name, data)?;
        tmp.persist(self.path(name)).map_err(|e| e.error)?;
        if let Ok(dir) = File::open(&self.root) {
            let _ = dir.sync_all();
        }
        Ok(())
    }

    fn create_new(&self, name: &str, data: &[u8]) -> io::Result<bool> {
        // link(2) is atomic and refuses to clobber, including over NFS.
        let tmp = self.temp_in_root(name, data)?;
        match fs::hard_link(tmp.path(), self.path(name)) {
            Ok(()) => Ok(true),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Ok(false),
            Err(e) => Err(e),
        }
    }

    fn remove(&self, name: &str) -> io::Result<bool> {
        match fs::remove_file(self.path(name)) {
            Ok(()) => Ok(true),
            Err(e) if e.kind() == ErrorKind::NotFound => {
                self.check_root()?;
                Ok(false)
            }
            Err(e) => Err(e),
        }
    }

    fn rename(&self, from: &str, to: &str) -> io::Result<()> {
        fs::rename(self.path(from), self.path(to))
    }

    fn append(&self, name: &str, data: &[u8]) -> io::Result<()> {
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.path(name))?;
        file.write_all(data)
    }

    fn list(&self) -> io::Result<Vec<String>> {
        let mut names = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            if entry.file_type()?.is_file() {
                if let Some(name) = entry.file_name().to_str() {
                    names.push(name.to_string());
                }
            }
        }
        names.sort();
        Ok(names)
    }
}

/// In-memory directory. Cloning shares the same contents.
#[derive(Debug, Clone)]
pub struct MemStorage {
    files: Arc<Mutex<BTreeMap<String, Vec<u8>>>>,
    reachable: Arc<AtomicBool>,
    label: String,
}

impl Default for MemStorage {
    fn default() -> Self {
        Self::new("mem")
    }
}

impl MemStorage {
    pub fn new(label: impl Into<String>) -> Self {
        Self {
            files: Arc::default(),
            reachable: Arc::new(AtomicBool::new(true)),
            label: label.into(),
        }
    }

    /// Makes every subsequent operation fail as if the share vanished.
    pub fn set_reachable(&self, reachable: bool) {
        self.reachable.store(reachable, Ordering::SeqCst);
    }

    fn files(&self) -> io::Result<std::sync::MutexGuard<'_, BTreeMap<String, Vec<u8>>>> {
        if !self.reachable.load(Ordering::SeqCst) {
            return Err(io::Error::new(ErrorKind::NotFound, "share unreachable"));
        }
        Ok(self.files.lock().unwrap())
    }
}

impl Storage for MemStorage {
    fn location(&self) -> String {
        format!("mem:{}", self.label)
    }

    fn read(&self, name: &str) -> io::Result<Option<Vec<u8>>> {
        Ok(self.files()?.get(name).cloned())
    }

    fn exists(&self, name: &str) -> io::Result<bool> {
        Ok(self.files()?.contains_key(name))
    }

    fn write_atomic(&self, name: &str, data: &[u8]) -> io::Result<()> {
        self.files()?.insert(name.to_string(), data.to_vec());
        Ok(())
    }

    fn create_new(&self, name: &str, data: &[u8]) -> io::Result<bool> {
        let mut files = self.files()?;
        if files.contains_key(name) {
            return Ok(false);
        }
        files.insert(name.to_string(), data.to_vec());
        Ok(true)
    }

    fn remove(&self, name: &str) -> io::Result<bool> {
        Ok(self.files()?.remove(name).is_some())
    }

    fn rename(&self, from: &str, to: &str) -> io::Result<()> {
        let mut files = self.files()?;
        let data = files
            .remove(from)
            .ok_or_else(|| io::Error::new(ErrorKind::NotFound, from.to_string()))?;
        files.insert(to.to_string(), data);
        Ok(())
    }

    fn append(&self, name: &str, data: &[u8]) -> io::Result<()> {
        self.files()?
            .entry(name.to_string())
            .or_default()
            .extend_from_slice(data);
        Ok(())
    }

    fn list(&self) -> io::Result<Vec<String>> {
        Ok(self.files()?.keys().cloned().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exercise(store: &dyn Storage) {
        assert_eq!(store.read("a").unwrap(), None);
        assert!(!store.exists("a").unwrap());
        assert!(store.create_new("a", b"one").unwrap());
        assert!(!store.create_new("a", b"two").unwrap());
        assert_eq!(store.read("a").unwrap().unwrap(), b"one");
        store.write_atomic("a", b"three").unwrap();
        assert_eq!(store.read("a").unwrap().unwrap(), b"three");
        store.rename("a", "b").unwrap();
        assert!(!store.exists("a").unwrap());
        assert!(store.rename("a", "c").is_err());
        store.append("log", b"x\n").unwrap();
        store.append("log", b"y\n").unwrap();
        assert_eq!(store.read("log").unwrap().unwrap(), b"x\ny\n");
        assert!(store.remove("b").unwrap());
        assert!(!store.remove("b").unwrap());
        assert_eq!(store.list().unwrap(), vec!["log".to_string()]);
    }

    #[test]
    fn fs_backend_primitives() {
        let dir = tempfile::tempdir().unwrap();
        exercise(&FsStorage::new(dir.path()));
    }

    #[test]
    fn mem_backend_primitives() {
        exercise(&MemStorage::default());
    }

    #[test]
    fn missing_root_is_an_error_not_absence() {
        let dir = tempfile::tempdir().unwrap();
        let gone = FsStorage::new(dir.path().join("nope"));
        assert!(gone.exists("go.dat").is_err());
        assert!(gone.remove("go.dat").is_err());
        assert!(gone.read("best.dat").is_err());
    }

    #[test]
    fn unreachable_mem_share_errors() {
        let store = MemStorage::default();
        store.set_reachable(false);
        assert!(store.exists("go.dat").is_err());
    }
}
