//! File-backed registry of named forwards.
//!
//! Each name is reserved by whoever claims it first and stays reserved until
//! that owner releases it. The record's destination can be cleared to
//! disable the forward without giving up the name, and connect access is
//! governed by the execute bits of a Unix-style mode.
//!
//! On-disk layout under the registry root, UTF-8 with LF line endings:
//!
//! ```text
//! <name>.fwd   first line `node:port`, or empty when disabled
//! <name>.meta  uid=<n>\ngid=<n>\nmode=<octal>\ncreated=<unix-seconds>\n
//! ```

use std::collections::HashMap;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::principal::Principal;
use crate::route::{validate_name, Destination, RouteError};

const FWD_EXT: &str = "fwd";
const META_EXT: &str = "meta";

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("name already taken: {0}")]
    NameTaken(String),
    #[error("no such forward: {0}")]
    NotFound(String),
    #[error("not owner of forward {0}")]
    NotOwner(String),
    #[error("malformed forward name: {0}")]
    MalformedName(String),
    #[error("malformed forward target: {0}")]
    MalformedTarget(String),
    #[error("malformed mode: {0}")]
    MalformedMode(String),
    #[error("corrupt registry entry {name}: {detail}")]
    Corrupt { name: String, detail: String },
    #[error("registry i/o: {0}")]
    Io(#[from] io::Error),
}

impl From<RouteError> for RegistryError {
    fn from(e: RouteError) -> Self {
        match e {
            RouteError::MalformedName(n) => RegistryError::MalformedName(n),
            RouteError::MalformedTarget(t) => RegistryError::MalformedTarget(t),
        }
    }
}

/// Permission bits, `0o000..=0o777`. Only the execute bit of each class has
/// meaning for connect access; the rest are carried along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Mode(u16);

impl Mode {
    pub const DEFAULT: Mode = Mode(0o700);

    const OWNER_EXEC: u16 = 0o100;
    const GROUP_EXEC: u16 = 0o010;
    const OTHER_EXEC: u16 = 0o001;

    pub fn from_bits(bits: u16) -> Option<Mode> {
        (bits <= 0o777).then_some(Mode(bits))
    }

    pub fn bits(self) -> u16 {
        self.0
    }
}

impl FromStr for Mode {
    type Err = RegistryError;

    /// Exactly three octal digits, e.g. `750`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 3 || !s.bytes().all(|b| (b'0'..=b'7').contains(&b)) {
            return Err(RegistryError::MalformedMode(s.to_string()));
        }
        let bits = u16::from_str_radix(s, 8).expect("validated octal");
        Ok(Mode(bits))
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:03o}", self.0)
    }
}

impl Serialize for Mode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Mode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardRecord {
    pub name: String,
    pub owner_uid: u32,
    pub group_gid: u32,
    pub mode: Mode,
    /// `None` means the forward is disabled but the name stays reserved.
    pub destination: Option<Destination>,
    /// Unix seconds.
    pub created_at: u64,
}

impl ForwardRecord {
    /// Execute-permission check, Unix style: the first class the principal
    /// falls into (owner, then group, then other) decides.
    pub fn permits_connect(&self, principal: &Principal) -> bool {
        let bits = self.mode.bits();
        if principal.uid() == self.owner_uid {
            bits & Mode::OWNER_EXEC != 0
        } else if principal.is_member_of(self.group_gid) {
            bits & Mode::GROUP_EXEC != 0
        } else {
            bits & Mode::OTHER_EXEC != 0
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.destination.is_some()
    }

    fn meta_text(&self) -> String {
        format!(
            "uid={}\ngid={}\nmode={}\ncreated={}\n",
            self.owner_uid, self.group_gid, self.mode, self.created_at
        )
    }

    fn fwd_text(&self) -> String {
        match &self.destination {
            Some(d) => format!("{d}\n"),
            None => String::new(),
        }
    }
}

/// Whether `principal` may connect through the forward described by `record`.
pub fn check_connect_permission(record: &ForwardRecord, principal: &Principal) -> bool {
    record.permits_connect(principal)
}

/// Registry rooted at a directory. Mutations are serialized; reads run
/// against the in-memory view, which only changes after the disk write
/// it mirrors has completed.
pub struct RegistryStore {
    root: PathBuf,
    entries: RwLock<HashMap<String, ForwardRecord>>,
    write_lock: Mutex<()>,
    nonce: AtomicU64,
}

impl fmt::Debug for RegistryStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RegistryStore")
            .field("root", &self.root)
            .finish_non_exhaustive()
    }
}

impl RegistryStore {
    /// Opens (creating if needed) the registry at `root` and loads every
    /// committed record. Half-written claims and stray temp files left by a
    /// crash are removed.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, RegistryError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let entries = load_dir(&root)?;
        Ok(Self {
            root,
            entries: RwLock::new(entries),
            write_lock: Mutex::new(()),
            nonce: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn claim_name(&self, name: &str, principal: &Principal) -> Result<ForwardRecord, RegistryError> {
        validate_name(name)?;
        let _guard = self.write_lock.lock().unwrap();
        if self.entries.read().unwrap().contains_key(name) {
            return Err(RegistryError::NameTaken(name.to_string()));
        }

        let record = ForwardRecord {
            name: name.to_string(),
            owner_uid: principal.uid(),
            group_gid: principal.primary_gid(),
            mode: Mode::DEFAULT,
            destination: None,
            created_at: unix_now(),
        };

        let meta_tmp = self.write_temp(name, META_EXT, &record.meta_text())?;
        // Exclusive create of the .fwd file is what reserves the name on disk.
        match OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(self.path(name, FWD_EXT))
        {
            Ok(_) => {}
            Err(e) => {
                let _ = fs::remove_file(&meta_tmp);
                if e.kind() == io::ErrorKind::AlreadyExists {
                    return Err(RegistryError::NameTaken(name.to_string()));
                }
                return Err(e.into());
            }
        }
        if let Err(e) = fs::rename(&meta_tmp, self.path(name, META_EXT)) {
            let _ = fs::remove_file(self.path(name, FWD_EXT));
            let _ = fs::remove_file(&meta_tmp);
            return Err(e.into());
        }

        self.entries
            .write()
            .unwrap()
            .insert(name.to_string(), record.clone());
        Ok(record)
    }

    pub fn release_name(&self, name: &str, principal: &Principal) -> Result<(), RegistryError> {
        let _guard = self.write_lock.lock().unwrap();
        self.owned(name, principal)?;
        fs::remove_file(self.path(name, FWD_EXT))?;
        // A leftover .meta without its .fwd is discarded on the next load.
        if let Err(e) = fs::remove_file(self.path(name, META_EXT)) {
            warn!(name, error = %e, "failed to remove forward metadata");
        }
        self.entries.write().unwrap().remove(name);
        Ok(())
    }

    pub fn set_destination(
        &self,
        name: &str,
        principal: &Principal,
        destination: Option<Destination>,
    ) -> Result<ForwardRecord, RegistryError> {
        if let Some(d) = &destination {
            Destination::new(d.node.clone(), d.port)?;
        }
        self.mutate(name, principal, |record| {
            record.destination = destination;
            FWD_EXT
        })
    }

    pub fn set_access(
        &self,
        name: &str,
        principal: &Principal,
        mode: &str,
    ) -> Result<ForwardRecord, RegistryError> {
        let mode: Mode = mode.parse()?;
        self.mutate(name, principal, |record| {
            record.mode = mode;
            META_EXT
        })
    }

    pub fn lookup(&self, name: &str) -> Result<ForwardRecord, RegistryError> {
        self.entries
            .read()
            .unwrap()
            .get(name)
            .cloned()
            .ok_or_else(|| RegistryError::NotFound(name.to_string()))
    }

    /// All records, ordered by name.
    pub fn list(&self) -> Vec<ForwardRecord> {
        let mut all: Vec<_> = self.entries.read().unwrap().values().cloned().collect();
        all.sort_by(|a, b| a.name.cmp(&b.name));
        all
    }

    fn owned(&self, name: &str, principal: &Principal) -> Result<ForwardRecord, RegistryError> {
        let record = self.lookup(name)?;
        if record.owner_uid != principal.uid() {
            return Err(RegistryError::NotOwner(name.to_string()));
        }
        Ok(record)
    }

    fn mutate(
        &self,
        name: &str,
        principal: &Principal,
        apply: impl FnOnce(&mut ForwardRecord) -> &'static str,
    ) -> Result<ForwardRecord, RegistryError> {
        let _guard = self.write_lock.lock().unwrap();
        let mut record = self.owned(name, principal)?;
        let ext = apply(&mut record);
        let text = if ext == FWD_EXT {
            record.fwd_text()
        } else {
            record.meta_text()
        };
        let tmp = self.write_temp(name, ext, &text)?;
        if let Err(e) = fs::rename(&tmp, self.path(name, ext)) {
            let _ = fs::remove_file(&tmp);
            return Err(e.into());
        }
        self.entries
            .write()
            .unwrap()
            .insert(name.to_string(), record.clone());
        Ok(record)
    }

    fn path(&self, name: &str, ext: &str) -> PathBuf {
        self.root.join(format!("{name}.{ext}"))
    }

    fn write_temp(&self, name: &str, ext: &str, text: &str) -> Result<PathBuf, RegistryError> {
        let n = self.nonce.fetch_add(1, Ordering::Relaxed);
        let tmp = self
            .root
            .join(format!(".{name}.{ext}.{}.{n}.tmp", std::process::id()));
        let mut f = OpenOptions::new().write(true).create_new(true).open(&tmp)?;
        f.write_all(text.as_bytes())?;
        Ok(tmp)
    }
}

fn load_dir(root: &Path) -> Result<HashMap<String, ForwardRecord>, RegistryError> {
    let mut entries = HashMap::new();
    let mut metas = Vec::new();
    for dirent in fs::read_dir(root)? {
        let path = dirent?.path();
        let Some(file_name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if file_name.starts_with('.') && file_name.ends_with(".tmp") {
            let _ = fs::remove_file(&path);
            continue;
        }
        let Some((name, ext)) = file_name.rsplit_once('.') else {
            continue;
        };
        if validate_name(name).is_err() {
            continue;
        }
        match ext {
            FWD_EXT => {
                let meta_path = root.join(format!("{name}.{META_EXT}"));
                if !meta_path.exists() {
                    warn!(name, "discarding forward without metadata");
                    let _ = fs::remove_file(&path);
                    continue;
                }
                let record = read_record(name, &path, &meta_path)?;
                entries.insert(name.to_string(), record);
            }
            META_EXT => metas.push((name.to_string(), path)),
            _ => {}
        }
    }
    for (name, path) in metas {
        if !entries.contains_key(&name) {
            let _ = fs::remove_file(path);
        }
    }
    Ok(entries)
}

fn read_record(name: &str, fwd: &Path, meta: &Path) -> Result<ForwardRecord, RegistryError> {
    let corrupt = |detail: String| RegistryError::Corrupt {
        name: name.to_string(),
        detail,
    };

    let mut uid = None;
    let mut gid = None;
    let mut mode = None;
    let mut created = None;
    for line in fs::read_to_string(meta)?.lines() {
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        match key {
            "uid" => uid = value.parse::<u32>().ok(),
            "gid" => gid = value.parse::<u32>().ok(),
            "mode" => mode = value.parse::<Mode>().ok(),
            "created" => created = value.parse::<u64>().ok(),
            _ => {}
        }
    }

    let content = fs::read_to_string(fwd)?;
    let first = content.lines().next().unwrap_or("").trim();
    let destination = if first.is_empty() {
        None
    } else {
        match first.parse::<Destination>() {
            Ok(d) => Some(d),
            Err(_) => {
                warn!(name, content = first, "unparseable destination, treating forward as disabled");
                None
            }
        }
    };

    Ok(ForwardRecord {
        name: name.to_string(),
        owner_uid: uid.ok_or_else(|| corrupt("missing uid".into()))?,
        group_gid: gid.ok_or_else(|| corrupt("missing gid".into()))?,
        mode: mode.ok_or_else(|| corrupt("missing mode".into()))?,
        destination,
        created_at: created.unwrap_or(0),
    })
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}
