//! Versioned model directories with `current` / `previous` symlinks.
//!
//! Layout under the registry root:
//!
//! ```text
//! v1/ script.json meta.json [gate_report.json] [ACTIVATED] COMPLETE
//! v2/ ...
//! current  -> v2
//! previous -> v1
//! registry.json
//! .lock
//! ```
//!
//! The links are the source of truth; `registry.json` is a derived index.
//! Links are only ever replaced by renaming a freshly created link over them,
//! so a reader always sees either the old or the new target.

use std::fs::{self, File};
use std::io::{self, Write};
use std::os::unix::fs::symlink;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{GateDecision, GateReport};
use crate::store::write_atomic;
use crate::vqa::MockScript;

pub const COMPLETE_MARKER: &str = "COMPLETE";
const ACTIVATED_MARKER: &str = "ACTIVATED";
const SCRIPT_FILE: &str = "script.json";
const META_FILE: &str = "meta.json";
const GATE_FILE: &str = "gate_report.json";
const INDEX_FILE: &str = "registry.json";
const CURRENT: &str = "current";
const PREVIOUS: &str = "previous";

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Corrupt { path: PathBuf, source: serde_json::Error },
    #[error("version {0} does not exist")]
    UnknownVersion(u64),
    #[error("version {0} has no completeness marker")]
    IncompleteArtifact(u64),
    #[error("version {0} has not passed the validation gate")]
    GateNotPassed(u64),
    #[error("no previous version to roll back to")]
    NoPreviousVersion,
    #[error("registry already has an active version")]
    AlreadyBootstrapped,
    #[error("link {0} does not name a version directory")]
    BadLink(PathBuf),
    #[error("injected crash after {0:?}")]
    InjectedCrash(Step),
}

/// Points at which a registry mutation can be interrupted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Step {
    PublishDirCreated,
    PublishArtifactsWritten,
    PublishMarkerWritten,
    ActivateMarkerWritten,
    PreviousLinkCreated,
    PreviousLinkSwapped,
    CurrentLinkCreated,
    CurrentLinkSwapped,
    RollbackExchanged,
    RollbackCurrentLinkCreated,
    RollbackCurrentSwapped,
    RollbackPreviousLinkCreated,
    RollbackPreviousSwapped,
    IndexWritten,
}

impl Step {
    pub const PUBLISH: [Step; 4] = [
        Step::PublishDirCreated,
        Step::PublishArtifactsWritten,
        Step::PublishMarkerWritten,
        Step::IndexWritten,
    ];
    pub const ACTIVATE: [Step; 6] = [
        Step::ActivateMarkerWritten,
        Step::PreviousLinkCreated,
        Step::PreviousLinkSwapped,
        Step::CurrentLinkCreated,
        Step::CurrentLinkSwapped,
        Step::IndexWritten,
    ];
    pub const ROLLBACK_EXCHANGE: [Step; 2] = [Step::RollbackExchanged, Step::IndexWritten];
    pub const ROLLBACK_RENAME: [Step; 5] = [
        Step::RollbackCurrentLinkCreated,
        Step::RollbackCurrentSwapped,
        Step::RollbackPreviousLinkCreated,
        Step::RollbackPreviousSwapped,
        Step::IndexWritten,
    ];
}

/// Called after each step; returning `true` aborts the operation on the spot,
/// leaving the filesystem exactly as a crash at that point would.
pub type FaultHook = Arc<dyn Fn(Step) -> bool + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VersionState {
    Staged,
    Active,
    Previous,
    Archived,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelVersion {
    pub version: u64,
    pub path: PathBuf,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<u64>,
    pub gate_report: Option<GateReport>,
    pub state: VersionState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryIndex {
    pub current: Option<u64>,
    pub previous: Option<u64>,
    pub versions: Vec<ModelVersion>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    version: u64,
    created_at: DateTime<Utc>,
    parent: Option<u64>,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RegistryError + '_ {
    move |source| RegistryError::Io { path: path.to_path_buf(), source }
}

fn version_dir_name(v: u64) -> String {
    format!("v{v}")
}

fn parse_version_name(name: &str) -> Option<u64> {
    name.strip_prefix('v')?.parse().ok()
}

fn write_synced(path: &Path, bytes: &[u8]) -> Result<(), RegistryError> {
    let mut f = File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))?;
    f.sync_all().map_err(io_err(path))
}

fn sync_dir(path: &Path) {
    if let Ok(d) = File::open(path) {
        let _ = d.sync_all();
    }
}

fn exists_no_follow(path: &Path) -> bool {
    fs::symlink_metadata(path).is_ok()
}

#[cfg(target_os = "linux")]
fn exchange(a: &Path, b: &Path) -> io::Result<()> {
    use std::ffi::CString;
    use std::os::unix::ffi::OsStrExt;
    let a = CString::new(a.as_os_str().as_bytes())?;
    let b = CString::new(b.as_os_str().as_bytes())?;
    // SAFETY: both paths are valid NUL-terminated strings that outlive the call.
    let rc = unsafe {
        libc::syscall(
            libc::SYS_renameat2,
            libc::AT_FDCWD,
            a.as_ptr(),
            libc::AT_FDCWD,
            b.as_ptr(),
            libc::RENAME_EXCHANGE as libc::c_uint,
        )
    };
    if rc == 0 {
        Ok(())
    } else {
        Err(io::Error::last_os_error())
    }
}

#[cfg(not(target_os = "linux"))]
fn exchange(_: &Path, _: &Path) -> io::Result<()> {
    Err(io::Error::from(io::ErrorKind::Unsupported))
}

pub struct Registry {
    root: PathBuf,
    lock: File,
    fault: Option<FaultHook>,
    use_exchange: bool,
}

impl std::fmt::Debug for Registry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Registry").field("root", &self.root).finish_non_exhaustive()
    }
}

struct LockGuard<'a>(&'a File);

impl Drop for LockGuard<'_> {
    fn drop(&mut self) {
        let _ = self.0.unlock();
    }
}

impl Registry {
    /// Opens (creating if needed) and repairs whatever an interrupted
    /// mutation left behind.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, RegistryError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        let lock_path = root.join(".lock");
        let lock = File::options()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(io_err(&lock_path))?;
        let reg = Registry { root, lock, fault: None, use_exchange: true };
        {
            let _g = reg.lock()?;
            reg.recover()?;
        }
        Ok(reg)
    }

    pub fn with_fault_hook(mut self, hook: FaultHook) -> Self {
        self.fault = Some(hook);
        self
    }

    pub fn clear_fault_hook(&mut self) {
        self.fault = None;
    }

    /// Rollback normally swaps the links with one `RENAME_EXCHANGE`; this
    /// forces the portable two-rename sequence instead.
    pub fn with_exchange(mut self, enabled: bool) -> Self {
        self.use_exchange = enabled;
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn lock(&self) -> Result<LockGuard<'_>, RegistryError> {
        self.lock.lock().map_err(io_err(&self.root))?;
        Ok(LockGuard(&self.lock))
    }

    fn step(&self, step: Step) -> Result<(), RegistryError> {
        match &self.fault {
            Some(hook) if hook(step) => Err(RegistryError::InjectedCrash(step)),
            _ => Ok(()),
        }
    }

    fn dir(&self, version: u64) -> PathBuf {
        self.root.join(version_dir_name(version))
    }

    fn is_complete(&self, version: u64) -> bool {
        self.dir(version).join(COMPLETE_MARKER).is_file()
    }

    fn recover(&self) -> Result<(), RegistryError> {
        for name in [format!("{CURRENT}.tmp"), format!("{PREVIOUS}.tmp")] {
            let p = self.root.join(name);
            if exists_no_follow(&p) {
                fs::remove_file(&p).map_err(io_err(&p))?;
            }
        }
        for v in self.version_dirs()? {
            if !self.is_complete(v) {
                log::warn!("registry: removing incomplete version v{v}");
                let d = self.dir(v);
                fs::remove_dir_all(&d).map_err(io_err(&d))?;
            }
        }
        let prev = self.root.join(PREVIOUS);
        if exists_no_follow(&prev) && !matches!(self.link_target(PREVIOUS), Ok(Some(v)) if self.is_complete(v)) {
            fs::remove_file(&prev).map_err(io_err(&prev))?;
        }
        sync_dir(&self.root);
        self.write_index()
    }

    fn version_dirs(&self) -> Result<Vec<u64>, RegistryError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.root).map_err(io_err(&self.root))? {
            let entry = entry.map_err(io_err(&self.root))?;
            let is_dir = entry.file_type().map(|t| t.is_dir()).unwrap_or(false);
            if let (true, Some(v)) = (is_dir, entry.file_name().to_str().and_then(parse_version_name)) {
                out.push(v);
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    fn link_target(&self, name: &str) -> Result<Option<u64>, RegistryError> {
        let link = self.root.join(name);
        match fs::read_link(&link) {
            Ok(target) => target
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(parse_version_name)
                .map(Some)
                .ok_or(RegistryError::BadLink(link)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(RegistryError::Io { path: link, source: e }),
        }
    }

    /// Version the `current` link points at. Lock-free.
    pub fn current_version(&self) -> Result<Option<u64>, RegistryError> {
        self.link_target(CURRENT)
    }

    pub fn previous_version(&self) -> Result<Option<u64>, RegistryError> {
        self.link_target(PREVIOUS)
    }

    /// Directory `current` resolves to, through the link.
    pub fn current_path(&self) -> PathBuf {
        self.root.join(CURRENT)
    }

    fn replace_link(&self, name: &str, version: u64, created: Step, swapped: Step) -> Result<(), RegistryError> {
        let tmp = self.root.join(format!("{name}.tmp"));
        if exists_no_follow(&tmp) {
            fs::remove_file(&tmp).map_err(io_err(&tmp))?;
        }
        symlink(version_dir_name(version), &tmp).map_err(io_err(&tmp))?;
        self.step(created)?;
        let dst = self.root.join(name);
        fs::rename(&tmp, &dst).map_err(io_err(&dst))?;
        sync_dir(&self.root);
        self.step(swapped)
    }

    /// Writes a new version directory; the completeness marker goes last.
    pub fn publish(
        &self,
        script: &MockScript,
        gate_report: Option<&GateReport>,
        created_at: DateTime<Utc>,
    ) -> Result<ModelVersion, RegistryError> {
        let _g = self.lock()?;
        let version = self.version_dirs()?.last().copied().unwrap_or(0) + 1;
        let dir = self.dir(version);
        fs::create_dir(&dir).map_err(io_err(&dir))?;
        self.step(Step::PublishDirCreated)?;
        let parent = self.current_version()?;
        write_synced(&dir.join(SCRIPT_FILE), &serde_json::to_vec(script).expect("script serializes"))?;
        let meta = Meta { version, created_at, parent };
        write_synced(&dir.join(META_FILE), &serde_json::to_vec_pretty(&meta).expect("meta serializes"))?;
        if let Some(r) = gate_report {
            write_synced(&dir.join(GATE_FILE), &serde_json::to_vec_pretty(r).expect("report serializes"))?;
        }
        sync_dir(&dir);
        self.step(Step::PublishArtifactsWritten)?;
        write_synced(&dir.join(COMPLETE_MARKER), b"")?;
        sync_dir(&dir);
        self.step(Step::PublishMarkerWritten)?;
        self.write_index()?;
        self.step(Step::IndexWritten)?;
        self.describe(version)
    }

    /// Points `current` at a gate-approved version; the old active version
    /// becomes `previous`.
    pub fn activate(&self, version: u64) -> Result<(), RegistryError> {
        let _g = self.lock()?;
        self.check_complete(version)?;
        match self.read_gate(version)? {
            Some(r) if r.decision == GateDecision::Deploy => {}
            _ => return Err(RegistryError::GateNotPassed(version)),
        }
        self.activate_locked(version)
    }

    /// Activates the very first version, which has no gate report to pass.
    pub fn activate_bootstrap(&self, version: u64) -> Result<(), RegistryError> {
        let _g = self.lock()?;
        if self.current_version()?.is_some() {
            return Err(RegistryError::AlreadyBootstrapped);
        }
        self.check_complete(version)?;
        self.activate_locked(version)
    }

    fn check_complete(&self, version: u64) -> Result<(), RegistryError> {
        if !self.dir(version).is_dir() {
            return Err(RegistryError::UnknownVersion(version));
        }
        if !self.is_complete(version) {
            return Err(RegistryError::IncompleteArtifact(version));
        }
        Ok(())
    }

    fn activate_locked(&self, version: u64) -> Result<(), RegistryError> {
        let current = self.current_version()?;
        if current == Some(version) {
            return Ok(());
        }
        write_synced(&self.dir(version).join(ACTIVATED_MARKER), b"")?;
        self.step(Step::ActivateMarkerWritten)?;
        if let Some(cur) = current {
            self.replace_link(PREVIOUS, cur, Step::PreviousLinkCreated, Step::PreviousLinkSwapped)?;
        }
        self.replace_link(CURRENT, version, Step::CurrentLinkCreated, Step::CurrentLinkSwapped)?;
        self.write_index()?;
        self.step(Step::IndexWritten)
    }

    /// Swaps `current` and `previous`.
    pub fn rollback(&self) -> Result<(u64, u64), RegistryError> {
        let _g = self.lock()?;
        let prev = self.previous_version()?.ok_or(RegistryError::NoPreviousVersion)?;
        let cur = self.current_version()?.ok_or(RegistryError::NoPreviousVersion)?;
        self.check_complete(prev)?;
        let exchanged = self.use_exchange
            && match exchange(&self.root.join(CURRENT), &self.root.join(PREVIOUS)) {
                Ok(()) => true,
                Err(e) => {
                    log::debug!("RENAME_EXCHANGE unavailable ({e}); using two renames");
                    false
                }
            };
        if exchanged {
            sync_dir(&self.root);
            self.step(Step::RollbackExchanged)?;
        } else {
            self.replace_link(CURRENT, prev, Step::RollbackCurrentLinkCreated, Step::RollbackCurrentSwapped)?;
            self.replace_link(PREVIOUS, cur, Step::RollbackPreviousLinkCreated, Step::RollbackPreviousSwapped)?;
        }
        self.write_index()?;
        self.step(Step::IndexWritten)?;
        Ok((prev, cur))
    }

    fn read_gate(&self, version: u64) -> Result<Option<GateReport>, RegistryError> {
        let p = self.dir(version).join(GATE_FILE);
        match fs::read(&p) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|source| RegistryError::Corrupt { path: p, source }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(RegistryError::Io { path: p, source: e }),
        }
    }

    pub fn load_script(&self, version: u64) -> Result<MockScript, RegistryError> {
        self.check_complete(version)?;
        let p = self.dir(version).join(SCRIPT_FILE);
        let bytes = fs::read(&p).map_err(io_err(&p))?;
        serde_json::from_slice(&bytes).map_err(|source| RegistryError::Corrupt { path: p, source })
    }

    pub fn describe(&self, version: u64) -> Result<ModelVersion, RegistryError> {
        self.check_complete(version)?;
        let dir = self.dir(version);
        let meta_path = dir.join(META_FILE);
        let meta: Meta = serde_json::from_slice(&fs::read(&meta_path).map_err(io_err(&meta_path))?)
            .map_err(|source| RegistryError::Corrupt { path: meta_path.clone(), source })?;
        let state = if self.current_version()? == Some(version) {
            VersionState::Active
        } else if self.previous_version()? == Some(version) {
            VersionState::Previous
        } else if dir.join(ACTIVATED_MARKER).exists() {
            VersionState::Archived
        } else {
            VersionState::Staged
        };
        Ok(ModelVersion {
            version,
            path: dir,
            created_at: meta.created_at,
            parent: meta.parent,
            gate_report: self.read_gate(version)?,
            state,
        })
    }

    /// Complete versions in ascending order. Incomplete directories are invisible.
    pub fn list(&self) -> Result<Vec<ModelVersion>, RegistryError> {
        self.version_dirs()?
            .into_iter()
            .filter(|v| self.is_complete(*v))
            .map(|v| self.describe(v))
            .collect()
    }

    pub fn index(&self) -> Result<RegistryIndex, RegistryError> {
        Ok(RegistryIndex {
            current: self.current_version()?,
            previous: self.previous_version()?,
            versions: self.list()?,
        })
    }

    fn write_index(&self) -> Result<(), RegistryError> {
        let index = self.index()?;
        let p = self.root.join(INDEX_FILE);
        write_atomic(&p, &serde_json::to_vec_pretty(&index).expect("index serializes")).map_err(io_err(&p))
    }
}
