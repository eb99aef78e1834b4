//! Isolated execution of untrusted program text.
//!
//! Each job runs in a fresh temporary working directory under a child
//! process with a wall-clock deadline, CPU and address-space rlimits, and
//! capped output capture. The child gets its own session/process group so a
//! timeout kill sweeps any grandchildren; isolation is process + rlimit +
//! workdir scoped, not a container. When `network_allowed` is false the
//! child additionally tries to enter an empty network namespace, falling
//! back silently where the kernel forbids unprivileged `unshare`.
//!
//! Config keys: `sandbox.interpreter_cmd`, `sandbox.pool_size`,
//! `sandbox.wall_timeout_s`, `sandbox.stdout_cap_bytes`,
//! `sandbox.network_allowed`. An optional remote-backend mode speaks the
//! small HTTP API in [`remote`].

use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

pub mod remote;

pub use remote::RemoteSandbox;

const SOURCE_FILE: &str = "main.py";
const POLL_INTERVAL: Duration = Duration::from_millis(10);

#[derive(Debug, thiserror::Error)]
pub enum SandboxError {
    /// The configured interpreter could not be found.
    #[error("sandbox unavailable: {0}")]
    SandboxUnavailable(String),
    #[error("failed to spawn sandboxed process: {0}")]
    SpawnFailure(std::io::Error),
    #[error("sandbox io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("remote sandbox error: {0}")]
    Remote(String),
    /// The remote backend cannot hand back produced files.
    #[error("artifact collection requires a local sandbox backend")]
    ArtifactsUnsupported,
    #[error("invalid limits: {0}")]
    InvalidLimits(String),
}

/// Resource limits for one execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecLimits {
    pub wall_timeout_s: f64,
    pub cpu_timeout_s: f64,
    pub memory_limit_bytes: u64,
    pub stdout_cap_bytes: usize,
    pub network_allowed: bool,
}

impl Default for ExecLimits {
    fn default() -> Self {
        Self {
            wall_timeout_s: 10.0,
            cpu_timeout_s: 10.0,
            memory_limit_bytes: 2 * 1024 * 1024 * 1024,
            stdout_cap_bytes: 4096,
            network_allowed: false,
        }
    }
}

impl ExecLimits {
    pub fn validate(&self) -> Result<(), SandboxError> {
        if !(self.wall_timeout_s > 0.0) {
            return Err(SandboxError::InvalidLimits("wall_timeout_s must be > 0".into()));
        }
        if self.stdout_cap_bytes == 0 {
            return Err(SandboxError::InvalidLimits("stdout_cap_bytes must be > 0".into()));
        }
        Ok(())
    }

    pub fn wall_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.wall_timeout_s)
    }
}

/// How an execution ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExitStatusKind {
    Ok,
    NonZero { code: i32 },
    Timeout,
    Killed,
}

/// Captured outcome of one execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecResult {
    pub stdout: String,
    pub stderr: String,
    pub exit_status: ExitStatusKind,
    pub duration_s: f64,
    /// True iff stdout exceeded the cap and was tail-dropped.
    pub truncated: bool,
    /// Files the job created under its workdir, relative paths.
    pub artifacts: Vec<String>,
}

impl ExecResult {
    pub fn succeeded(&self) -> bool {
        self.exit_status == ExitStatusKind::Ok
    }
}

/// A file pre-populated into the job workdir before execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFile {
    pub name: String,
    #[serde(with = "bytes_b64")]
    pub bytes: Vec<u8>,
    pub readonly: bool,
}

impl SeedFile {
    pub fn readonly(name: impl Into<String>, bytes: Vec<u8>) -> Self {
        Self { name: name.into(), bytes, readonly: true }
    }
}

mod bytes_b64 {
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        base64::engine::general_purpose::STANDARD
            .decode(s.as_bytes())
            .map_err(serde::de::Error::custom)
    }
}

/// One job for [`Sandbox::execute_many`].
#[derive(Debug, Clone)]
pub struct ExecJob {
    pub source: String,
    pub limits: ExecLimits,
    pub seed: Vec<SeedFile>,
}

impl ExecJob {
    pub fn new(source: impl Into<String>, limits: ExecLimits) -> Self {
        Self { source: source.into(), limits, seed: Vec::new() }
    }
}

/// An execution whose workdir is kept alive so artifacts can be read.
pub struct Execution {
    pub result: ExecResult,
    workdir: tempfile::TempDir,
}

impl Execution {
    pub fn workdir(&self) -> &Path {
        self.workdir.path()
    }

    pub fn read_artifact(&self, rel: &str) -> std::io::Result<Vec<u8>> {
        std::fs::read(self.workdir.path().join(rel))
    }
}

/// Local subprocess backend.
#[derive(Debug, Clone)]
pub struct LocalSandbox {
    interpreter_cmd: Vec<String>,
}

impl Default for LocalSandbox {
    fn default() -> Self {
        Self { interpreter_cmd: vec!["python3".into()] }
    }
}

impl LocalSandbox {
    /// `interpreter_cmd` is the command prefix the source file is appended
    /// to, e.g. `["python3"]`.
    pub fn new(interpreter_cmd: Vec<String>) -> Result<Self, SandboxError> {
        if interpreter_cmd.is_empty() {
            return Err(SandboxError::SandboxUnavailable("empty interpreter command".into()));
        }
        Ok(Self { interpreter_cmd })
    }

    pub fn execute(
        &self,
        source: &str,
        limits: &ExecLimits,
        seed: &[SeedFile],
    ) -> Result<ExecResult, SandboxError> {
        self.execute_keep(source, limits, seed).map(|e| e.result)
    }

    /// Like [`LocalSandbox::execute`] but hands back the workdir so produced
    /// files can be read before cleanup.
    pub fn execute_keep(
        &self,
        source: &str,
        limits: &ExecLimits,
        seed: &[SeedFile],
    ) -> Result<Execution, SandboxError> {
        limits.validate()?;
        let workdir = tempfile::Builder::new().prefix("sbx-").tempdir()?;
        let mut preexisting = vec![SOURCE_FILE.to_string()];
        std::fs::write(workdir.path().join(SOURCE_FILE), source)?;
        for file in seed {
            let path = safe_join(workdir.path(), &file.name)?;
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(&path, &file.bytes)?;
            if file.readonly {
                let mut perms = std::fs::metadata(&path)?.permissions();
                #[cfg(unix)]
                {
                    use std::os::unix::fs::PermissionsExt;
                    perms.set_mode(0o444);
                }
                std::fs::set_permissions(&path, perms)?;
            }
            preexisting.push(file.name.clone());
        }

        let mut cmd = Command::new(&self.interpreter_cmd[0]);
        cmd.args(&self.interpreter_cmd[1..])
            .arg(SOURCE_FILE)
            .current_dir(workdir.path())
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .env_clear()
            .env("PATH", "/usr/local/bin:/usr/bin:/bin")
            .env("HOME", workdir.path())
            .env("MPLCONFIGDIR", workdir.path().join(".mplconfig"));
        apply_child_isolation(&mut cmd, limits);

        let start = Instant::now();
        let mut child = cmd.spawn().map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                SandboxError::SandboxUnavailable(format!(
                    "interpreter {:?} not found",
                    self.interpreter_cmd[0]
                ))
            } else {
                SandboxError::SpawnFailure(e)
            }
        })?;
        let pid = child.id() as libc::pid_t;

        let stdout_pipe = child.stdout.take().expect("stdout piped");
        let stderr_pipe = child.stderr.take().expect("stderr piped");
        let cap = limits.stdout_cap_bytes;
        let stdout_reader = std::thread::spawn(move || read_capped(stdout_pipe, cap));
        let stderr_reader = std::thread::spawn(move || read_capped(stderr_pipe, cap));

        let (status, timed_out) = wait_with_deadline(&mut child, pid, limits.wall_timeout());
        let duration_s = start.elapsed().as_secs_f64();

        let (stdout, stdout_truncated) = stdout_reader.join().unwrap_or_default();
        let (stderr, _) = stderr_reader.join().unwrap_or_default();

        let exit_status = if timed_out {
            ExitStatusKind::Timeout
        } else {
            match status.and_then(|s| s.code()) {
                Some(0) => ExitStatusKind::Ok,
                Some(code) => ExitStatusKind::NonZero { code },
                None => ExitStatusKind::Killed,
            }
        };

        let artifacts = list_artifacts(workdir.path(), &preexisting)?;

        Ok(Execution {
            result: ExecResult {
                stdout,
                stderr,
                exit_status,
                duration_s,
                truncated: stdout_truncated,
                artifacts,
            },
            workdir,
        })
    }
}

fn apply_child_isolation(cmd: &mut Command, limits: &ExecLimits) {
    #[cfg(unix)]
    {
        use std::os::unix::process::CommandExt;
        let cpu_secs = limits.cpu_timeout_s.ceil().max(1.0) as u64;
        let mem_bytes = limits.memory_limit_bytes;
        let drop_network = !limits.network_allowed;
        // SAFETY: only async-signal-safe calls (setsid, setrlimit, unshare).
        unsafe {
            cmd.pre_exec(move || {
                libc::setsid();
                let cpu = libc::rlimit { rlim_cur: cpu_secs, rlim_max: cpu_secs + 1 };
                libc::setrlimit(libc::RLIMIT_CPU, &cpu);
                if mem_bytes > 0 {
                    let mem = libc::rlimit { rlim_cur: mem_bytes, rlim_max: mem_bytes };
                    libc::setrlimit(libc::RLIMIT_AS, &mem);
                }
                if drop_network {
                    // Best effort: unprivileged kernels reject this.
                    libc::unshare(libc::CLONE_NEWNET);
                }
                Ok(())
            });
        }
    }
    #[cfg(not(unix))]
    {
        let _ = (cmd, limits);
    }
}

/// Polls the child until exit or deadline; on deadline the whole process
/// group receives SIGKILL. Returns the exit status (None if kill/reap raced)
/// and whether the deadline fired.
fn wait_with_deadline(
    child: &mut Child,
    pid: libc::pid_t,
    deadline: Duration,
) -> (Option<std::process::ExitStatus>, bool) {
    let start = Instant::now();
    loop {
        match child.try_wait() {
            Ok(Some(status)) => return (Some(status), false),
            Ok(None) => {}
            Err(_) => return (None, false),
        }
        if start.elapsed() >= deadline {
            kill_group(pid);
            let status = child.wait().ok();
            return (status, true);
        }
        std::thread::sleep(POLL_INTERVAL);
    }
}

fn kill_group(pid: libc::pid_t) {
    #[cfg(unix)]
    // SAFETY: plain kill(2) on the child's process group.
    unsafe {
        libc::kill(-pid, libc::SIGKILL);
        libc::kill(pid, libc::SIGKILL);
    }
    #[cfg(not(unix))]
    let _ = pid;
}

/// Reads a stream to EOF, retaining at most `cap` bytes. Draining past the
/// cap keeps the child from blocking on a full pipe.
fn read_capped<R: Read>(mut reader: R, cap: usize) -> (String, bool) {
    let mut kept = Vec::new();
    let mut truncated = false;
    let mut chunk = [0u8; 8192];
    loop {
        match reader.read(&mut chunk) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                if kept.len() < cap {
                    let take = (cap - kept.len()).min(n);
                    kept.extend_from_slice(&chunk[..take]);
                    if take < n {
                        truncated = true;
                    }
                } else {
                    truncated = true;
                }
            }
        }
    }
    (String::from_utf8_lossy(&kept).into_owned(), truncated)
}

fn list_artifacts(workdir: &Path, preexisting: &[String]) -> Result<Vec<String>, SandboxError> {
    let mut out = Vec::new();
    let mut stack = vec![workdir.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = match std::fs::read_dir(&dir) {
            Ok(e) => e,
            Err(_) => continue,
        };
        for entry in entries.flatten() {
            let path = entry.path();
            let rel = path
                .strip_prefix(workdir)
                .expect("walk stays under workdir")
                .to_string_lossy()
                .into_owned();
            if rel.starts_with(".mplconfig") {
                continue;
            }
            if path.is_dir() {
                stack.push(path);
            } else if !preexisting.iter().any(|p| p == &rel) {
                out.push(rel);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn safe_join(root: &Path, rel: &str) -> Result<PathBuf, SandboxError> {
    let rel_path = Path::new(rel);
    if rel_path.is_absolute()
        || rel_path
            .components()
            .any(|c| matches!(c, std::path::Component::ParentDir))
    {
        return Err(SandboxError::Io(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            format!("seed file name {rel:?} escapes the workdir"),
        )));
    }
    Ok(root.join(rel_path))
}

/// Shared executor: a backend plus a bounded worker pool for batch runs.
#[derive(Debug, Clone)]
pub struct Sandbox {
    backend: Backend,
    pool_size: usize,
}

#[derive(Debug, Clone)]
enum Backend {
    Local(LocalSandbox),
    Remote(RemoteSandbox),
}

impl Default for Sandbox {
    fn default() -> Self {
        Self::local(LocalSandbox::default(), 8)
    }
}

impl Sandbox {
    pub fn local(backend: LocalSandbox, pool_size: usize) -> Self {
        Self { backend: Backend::Local(backend), pool_size: pool_size.max(1) }
    }

    pub fn remote(backend: RemoteSandbox, pool_size: usize) -> Self {
        Self { backend: Backend::Remote(backend), pool_size: pool_size.max(1) }
    }

    pub fn execute(
        &self,
        source: &str,
        limits: &ExecLimits,
        seed: &[SeedFile],
    ) -> Result<ExecResult, SandboxError> {
        match &self.backend {
            Backend::Local(local) => local.execute(source, limits, seed),
            Backend::Remote(remote) => remote.execute(source, limits, seed),
        }
    }

    /// Local-backend only: run and keep the workdir for artifact reads.
    pub fn execute_keep(
        &self,
        source: &str,
        limits: &ExecLimits,
        seed: &[SeedFile],
    ) -> Result<Execution, SandboxError> {
        match &self.backend {
            Backend::Local(local) => local.execute_keep(source, limits, seed),
            Backend::Remote(_) => Err(SandboxError::ArtifactsUnsupported),
        }
    }

    /// Runs jobs concurrently up to the pool bound. Results are positionally
    /// aligned with `jobs`; per-job failures are embedded, the batch itself
    /// never fails wholesale.
    pub fn execute_many(&self, jobs: &[ExecJob]) -> Vec<Result<ExecResult, SandboxError>> {
        if jobs.is_empty() {
            return Vec::new();
        }
        let results: Mutex<Vec<Option<Result<ExecResult, SandboxError>>>> =
            Mutex::new((0..jobs.len()).map(|_| None).collect());
        let next = AtomicUsize::new(0);
        let workers = self.pool_size.min(jobs.len());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= jobs.len() {
                        break;
                    }
                    let job = &jobs[i];
                    let result = self.execute(&job.source, &job.limits, &job.seed);
                    results.lock().unwrap()[i] = Some(result);
                });
            }
        });
        results
            .into_inner()
            .unwrap()
            .into_iter()
            .map(|r| r.expect("every job index visited"))
            .collect()
    }
}
