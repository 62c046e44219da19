//! Remote-shell backend and the command-rendering table.
//!
//! Each node is driven by short POSIX `sh` scripts sent over a [`Transport`].
//! Completion markers live under [`MARKER_DIR`].

use std::collections::BTreeMap;
use std::io::Write;
use std::process::{Command, Stdio};
use std::sync::Mutex;
use std::time::Instant;

use crate::configgen::{add_usrquota, useradd_command, QuotaCommand, ACCOUNT_FILES, FSTAB_PATH, MOTD_PATH};
use crate::executor::{Backend, BackendError, Outcome, Probe};
use crate::model::{ClusterSpec, UserSpec, KIB};
use crate::monitor::{parse_proc_net_dev, CounterSource, Scalar, TrafficSample};
use crate::planner::{
    contains_block, Account, MountEntry, NodeObservation, Operation, PowerState, QuotaUsage, INFRASTRUCTURE,
    MARKER_MONITOR,
};

pub const MARKER_DIR: &str = "/var/lib/hepcluster/markers";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandOutput {
    pub status: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Runs a shell script on a host.
pub trait Transport: Sync {
    /// `Err(Unreachable)` when the host cannot be contacted at all.
    fn run(&self, host: &str, script: &str) -> Result<CommandOutput, BackendError>;
}

/// `ssh root@host sh -s` in batch mode.
#[derive(Debug, Clone)]
pub struct SshTransport {
    pub user: String,
    pub connect_timeout_secs: u32,
}

impl Default for SshTransport {
    fn default() -> Self {
        Self {
            user: "root".into(),
            connect_timeout_secs: 10,
        }
    }
}

impl Transport for SshTransport {
    fn run(&self, host: &str, script: &str) -> Result<CommandOutput, BackendError> {
        let mut child = Command::new("ssh")
            .args([
                "-o",
                "BatchMode=yes",
                "-o",
                &format!("ConnectTimeout={}", self.connect_timeout_secs),
                &format!("{}@{host}", self.user),
                "sh",
                "-s",
            ])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| BackendError::Transport(format!("ssh: {e}")))?;
        child
            .stdin
            .take()
            .expect("stdin piped")
            .write_all(script.as_bytes())
            .map_err(|e| BackendError::Transport(format!("ssh: {e}")))?;
        let out = child
            .wait_with_output()
            .map_err(|e| BackendError::Transport(format!("ssh: {e}")))?;
        let status = out.status.code().unwrap_or(-1);
        if status == 255 {
            return Err(BackendError::Unreachable(host.to_string()));
        }
        Ok(CommandOutput {
            status,
            stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
            stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        })
    }
}

/// Single-quotes `s` for `sh`.
pub fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

fn parent_dir(path: &str) -> &str {
    match path.rfind('/') {
        Some(0) | None => "/",
        Some(i) => &path[..i],
    }
}

fn marker_path(marker: &str) -> String {
    format!("{MARKER_DIR}/{marker}")
}

/// Script that writes `content` to `path` unless it already matches.
pub fn write_file_script(path: &str, content: &str) -> String {
    let (p, c) = (shell_quote(path), shell_quote(content));
    format!(
        "if [ -f {p} ] && printf '%s' {c} | cmp -s - {p}; then echo unchanged; \
         else mkdir -p {dir} && printf '%s' {c} > {p} && echo changed; fi\n",
        dir = shell_quote(parent_dir(path))
    )
}

fn append_script(path: &str, content: &str) -> String {
    let p = shell_quote(path);
    format!(
        "mkdir -p {dir} && touch {p} && \
         {{ [ ! -s {p} ] || [ \"$(tail -c 1 {p} | od -An -c | tr -d ' ')\" = '\\n' ] || echo >> {p}; }} && \
         printf '%s' {c} >> {p} && echo changed\n",
        dir = shell_quote(parent_dir(path)),
        c = shell_quote(content)
    )
}

fn mount_script(source: &str, mountpoint: &str) -> String {
    let (s, m) = (shell_quote(source), shell_quote(mountpoint));
    format!(
        "if awk -v s={s} -v m={m} '$1==s && $2==m {{f=1}} END {{exit !f}}' /proc/mounts; then echo unchanged; \
         else mkdir -p {m} && mount {s} {m} && echo changed; fi\n"
    )
}

fn create_user_script(username: &str, account: &Account) -> String {
    let u = shell_quote(username);
    let spec = UserSpec {
        username: username.to_string(),
        group: account.group.clone(),
        shell: account.shell.clone(),
        home: account.home.clone(),
        quota_soft_bytes: 0,
        quota_hard_bytes: 0,
    };
    format!(
        "if id -u {u} >/dev/null 2>&1; then usermod -g {g} -s {sh} -d {h} {u} && echo changed; \
         else {add} && passwd -l {u} >/dev/null && echo changed; fi\n",
        g = shell_quote(&account.group),
        sh = shell_quote(&account.shell),
        h = shell_quote(&account.home),
        add = useradd_command(&spec),
    )
}

fn marker_script(marker: &str) -> String {
    let m = shell_quote(&marker_path(marker));
    format!("if [ -e {m} ]; then echo unchanged; else mkdir -p {MARKER_DIR} && touch {m} && echo changed; fi\n")
}

/// Script that dumps everything [`parse_observation`] understands.
pub fn probe_script(probe: &Probe) -> String {
    let mut s = String::from("echo '@@up'\n");
    for f in &probe.files {
        let q = shell_quote(f);
        s.push_str(&format!(
            "if [ -f {q} ]; then printf '@@file %s ' {q}; od -An -tx1 -v {q} | tr -d ' \\n'; echo; fi\n"
        ));
    }
    s.push_str("awk '$3 ~ /^nfs/ {print \"@@mount\", $1, $2}' /proc/mounts\n");
    for u in &probe.users {
        let q = shell_quote(u);
        s.push_str(&format!(
            "if getent passwd {q} >/dev/null; then echo \"@@user {u} $(id -gn {q}) $(getent passwd {q} | cut -d: -f6) $(getent passwd {q} | cut -d: -f7)\"; fi\n"
        ));
    }
    if !probe.storage_path.is_empty() {
        let p = shell_quote(&probe.storage_path);
        s.push_str(&format!(
            "quotaon -pu {p} 2>/dev/null | grep -q 'is on' && echo '@@quota_on'\n\
             repquota -u {p} 2>/dev/null | awk '$2 ~ /^[-+][-+]$/ {{print \"@@quota\", $1, $3, $4, $5}}'\n"
        ));
    }
    s.push_str(&format!("ls {MARKER_DIR} 2>/dev/null | sed 's/^/@@marker /'\n"));
    s
}

/// Parses the output of [`probe_script`]. Quota figures are 1 KiB blocks.
pub fn parse_observation(stdout: &str) -> Result<NodeObservation, String> {
    let mut obs = NodeObservation {
        reachable: false,
        power: PowerState::Unknown,
        files: BTreeMap::new(),
        mounts: Default::default(),
        accounts: BTreeMap::new(),
        quota_enabled: false,
        quotas: BTreeMap::new(),
        markers: Default::default(),
    };
    for line in stdout.lines() {
        let mut t = line.split(' ');
        match t.next() {
            Some("@@up") => {
                obs.reachable = true;
                obs.power = PowerState::On;
            }
            Some("@@file") => {
                let (Some(path), Some(hexed)) = (t.next(), t.next()) else {
                    return Err(format!("bad file line `{line}`"));
                };
                let bytes = hex::decode(hexed).map_err(|e| format!("{path}: {e}"))?;
                let text = String::from_utf8(bytes).map_err(|e| format!("{path}: {e}"))?;
                obs.files.insert(path.to_string(), text);
            }
            Some("@@mount") => {
                if let (Some(source), Some(mountpoint)) = (t.next(), t.next()) {
                    obs.mounts.insert(MountEntry {
                        source: source.to_string(),
                        mountpoint: mountpoint.to_string(),
                    });
                }
            }
            Some("@@user") => {
                let f: Vec<&str> = t.collect();
                let [name, group, home, shell] = f[..] else {
                    return Err(format!("bad user line `{line}`"));
                };
                obs.accounts.insert(
                    name.to_string(),
                    Account {
                        group: group.to_string(),
                        shell: shell.to_string(),
                        home: home.to_string(),
                    },
                );
            }
            Some("@@quota_on") => obs.quota_enabled = true,
            Some("@@quota") => {
                let f: Vec<&str> = t.collect();
                let [name, used, soft, hard] = f[..] else {
                    return Err(format!("bad quota line `{line}`"));
                };
                let n = |s: &str| {
                    s.trim_end_matches('*')
                        .parse::<u64>()
                        .map(|b| b * KIB)
                        .map_err(|e| format!("quota for {name}: {e}"))
                };
                obs.quotas.insert(
                    name.to_string(),
                    QuotaUsage {
                        used: n(used)?,
                        soft: n(soft)?,
                        hard: n(hard)?,
                    },
                );
            }
            Some("@@marker") => {
                if let Some(m) = t.next() {
                    obs.markers.insert(m.to_string());
                }
            }
            _ => {}
        }
    }
    Ok(obs)
}

/// [`Backend`] over a [`Transport`]. Powering on a node is a manual step;
/// it succeeds only when the node already answers.
pub struct ShellBackend<T: Transport> {
    transport: T,
    storage_path: String,
    interfaces: BTreeMap<String, Vec<String>>,
    started: Instant,
    log: Mutex<Vec<(String, String)>>,
}

impl<T: Transport> ShellBackend<T> {
    pub fn new(transport: T, spec: &ClusterSpec) -> Self {
        Self {
            transport,
            storage_path: spec.storage.path.clone(),
            interfaces: spec
                .nodes
                .iter()
                .map(|n| {
                    (
                        n.hostname.clone(),
                        n.interfaces.iter().map(|i| i.name.clone()).collect(),
                    )
                })
                .collect(),
            started: Instant::now(),
            log: Mutex::new(Vec::new()),
        }
    }

    /// Every (host, script) sent so far.
    pub fn scripts(&self) -> Vec<(String, String)> {
        self.log.lock().expect("log lock").clone()
    }

    fn exec(&self, host: &str, script: &str) -> Result<CommandOutput, BackendError> {
        if !self.interfaces.contains_key(host) {
            return Err(BackendError::UnknownNode(host.to_string()));
        }
        self.log
            .lock()
            .expect("log lock")
            .push((host.to_string(), script.to_string()));
        let out = self.transport.run(host, script)?;
        if out.status != 0 {
            let msg = out.stderr.trim();
            return Err(BackendError::Rejected {
                node: host.to_string(),
                message: if msg.is_empty() {
                    format!("exit status {}", out.status)
                } else {
                    msg.to_string()
                },
            });
        }
        Ok(out)
    }

    fn outcome(&self, host: &str, script: &str) -> Result<Outcome, BackendError> {
        let out = self.exec(host, script)?;
        Ok(if out.stdout.lines().any(|l| l == "changed") {
            Outcome::Changed
        } else {
            Outcome::Unchanged
        })
    }

    fn read_file(&self, host: &str, path: &str) -> Result<Option<String>, BackendError> {
        let probe = Probe {
            files: vec![path.to_string()],
            ..Probe::default()
        };
        let out = self.exec(host, &probe_script(&probe))?;
        let obs = parse_observation(&out.stdout).map_err(BackendError::Transport)?;
        Ok(obs.files.get(path).cloned())
    }
}

impl<T: Transport> Backend for ShellBackend<T> {
    /// Network gear has no control interface and is assumed on.
    fn infrastructure_power(&self) -> Result<PowerState, BackendError> {
        Ok(PowerState::On)
    }

    fn read_state(&self, node: &str, probe: &Probe) -> Result<NodeObservation, BackendError> {
        let out = self.exec(node, &probe_script(probe))?;
        parse_observation(&out.stdout).map_err(BackendError::Transport)
    }

    fn power(&self, target: &str, on: bool) -> Result<Outcome, BackendError> {
        if target == INFRASTRUCTURE {
            return if on {
                Ok(Outcome::Unchanged)
            } else {
                Err(BackendError::Rejected {
                    node: target.into(),
                    message: "network infrastructure is never powered off".into(),
                })
            };
        }
        match (on, self.exec(target, "true\n")) {
            (true, Ok(_)) => Ok(Outcome::Unchanged),
            (true, Err(BackendError::Unreachable(_))) => Err(BackendError::Rejected {
                node: target.into(),
                message: "switch the node on by hand".into(),
            }),
            (false, Ok(_)) => self.outcome(target, "shutdown -h now && echo changed\n"),
            (false, Err(BackendError::Unreachable(_))) => Ok(Outcome::Unchanged),
            (_, Err(e)) => Err(e),
        }
    }

    fn write_file(&self, node: &str, path: &str, content: &str) -> Result<Outcome, BackendError> {
        self.outcome(node, &write_file_script(path, content))
    }

    fn append_file(&self, node: &str, path: &str, content: &str) -> Result<Outcome, BackendError> {
        let existing = self.read_file(node, path)?.unwrap_or_default();
        if contains_block(&existing, content) {
            return Ok(Outcome::Unchanged);
        }
        self.outcome(node, &append_script(path, content))
    }

    fn mount(&self, node: &str, source: &str, mountpoint: &str) -> Result<Outcome, BackendError> {
        self.outcome(node, &mount_script(source, mountpoint))
    }

    fn create_user(&self, node: &str, username: &str, account: &Account) -> Result<Outcome, BackendError> {
        self.outcome(node, &create_user_script(username, account))
    }

    fn enable_quota(&self, node: &str, path: &str) -> Result<Outcome, BackendError> {
        let fstab = self.read_file(node, FSTAB_PATH)?.unwrap_or_default();
        let mut script = String::new();
        if add_usrquota(&fstab, path) != fstab {
            script.push_str(&format!("{}\n", QuotaCommand::AddUsrquota { path: path.into() }));
        }
        for step in [
            QuotaCommand::Remount { path: path.into() },
            QuotaCommand::Check { path: path.into() },
            QuotaCommand::On { path: path.into() },
        ] {
            script.push_str(&format!("{} || exit 1\n", step.batch_form()));
        }
        script.push_str("echo changed\n");
        self.outcome(node, &script)
    }

    fn set_quota(&self, node: &str, username: &str, soft: u64, hard: u64) -> Result<Outcome, BackendError> {
        let cmd = QuotaCommand::SetQuota {
            user: username.into(),
            soft_bytes: soft,
            hard_bytes: hard,
            path: self.storage_path.clone(),
        };
        self.outcome(node, &format!("{} && echo changed\n", cmd.batch_form()))
    }

    fn set_marker(&self, node: &str, marker: &str) -> Result<Outcome, BackendError> {
        self.outcome(node, &marker_script(marker))
    }

    fn enable_monitor(&self, node: &str) -> Result<Outcome, BackendError> {
        let script = format!(
            "command -v iptraf >/dev/null 2>&1 || command -v iptraf-ng >/dev/null 2>&1 || \
             {{ echo 'iptraf is not installed' >&2; exit 1; }}\n{}",
            marker_script(MARKER_MONITOR)
        );
        self.outcome(node, &script)
    }
}

impl<T: Transport> CounterSource for ShellBackend<T> {
    /// Reads `/proc/net/dev` on every node; unreachable nodes are left out.
    fn sample<S: Scalar>(&self) -> Result<TrafficSample<S>, BackendError> {
        let mut counters = BTreeMap::new();
        for (host, ifaces) in &self.interfaces {
            let out = match self.exec(host, "cat /proc/net/dev\n") {
                Ok(out) => out,
                Err(BackendError::Unreachable(_)) => continue,
                Err(e) => return Err(e),
            };
            let parsed = parse_proc_net_dev(&out.stdout);
            for iface in ifaces {
                if let Some(c) = parsed.get(iface) {
                    counters.insert((host.clone(), iface.clone()), *c);
                }
            }
        }
        let timestamp = S::from_f64(self.started.elapsed().as_secs_f64()).expect("finite elapsed time");
        Ok(TrafficSample { timestamp, counters })
    }
}

/// Operator-facing commands for an operation, in the form an administrator
/// would type them. Steps with no command are rendered as `# manual:` notes.
pub fn render_commands(op: &Operation, storage_path: &str) -> Vec<String> {
    let manual = |s: String| vec![format!("# manual: {s}")];
    match op {
        Operation::PowerOn => manual("switch the machine on".into()),
        Operation::PowerOff => vec!["shutdown -h now".into()],
        Operation::LayoutStorage { raid_level, partitions } => {
            let mut out = manual(format!("configure hardware RAID level {}", u8::from(*raid_level)));
            out.extend(
                partitions
                    .entries
                    .iter()
                    .map(|p| format!("# manual: partition {} {} bytes", p.mount, p.size_bytes)),
            );
            out.push(format!("touch {}", marker_path(crate::planner::MARKER_RAID)));
            out
        }
        Operation::InstallBase { .. } => vec![
            "# manual: install the base operating system".into(),
            "ssh-keygen -t rsa".into(),
            format!("touch {}", marker_path(crate::planner::MARKER_BASE_OS)),
        ],
        Operation::WriteFile { path, .. } if path == MOTD_PATH => vec![format!("vi {path}")],
        Operation::WriteFile { path, .. } => vec![format!("cat > {path}")],
        Operation::AppendFile { path, .. } => vec![format!("cat >> {path}")],
        Operation::Mount { source, mountpoint } => vec![format!("mount {source} {mountpoint}")],
        Operation::PersistMount { line } => vec![format!("echo '{line}' >> {FSTAB_PATH}")],
        Operation::CreateUser { username, account } => {
            let spec = UserSpec {
                username: username.clone(),
                group: account.group.clone(),
                shell: account.shell.clone(),
                home: account.home.clone(),
                quota_soft_bytes: 0,
                quota_hard_bytes: 0,
            };
            vec![useradd_command(&spec), format!("passwd -l {username}")]
        }
        Operation::SyncAccounts { .. } => ACCOUNT_FILES.iter().map(|f| format!("scp -p master:{f} {f}")).collect(),
        Operation::EnableQuota { path } => [
            QuotaCommand::AddUsrquota { path: path.clone() },
            QuotaCommand::Remount { path: path.clone() },
            QuotaCommand::Check { path: path.clone() },
            QuotaCommand::On { path: path.clone() },
        ]
        .iter()
        .map(ToString::to_string)
        .collect(),
        Operation::SetQuota {
            username,
            soft_bytes,
            hard_bytes,
        } => {
            let cmd = QuotaCommand::SetQuota {
                user: username.clone(),
                soft_bytes: *soft_bytes,
                hard_bytes: *hard_bytes,
                path: storage_path.to_string(),
            };
            vec![cmd.to_string(), cmd.batch_form()]
        }
        Operation::InstallApp {
            app,
            install_path,
            source_url,
        } => vec![
            format!("mkdir -p {install_path}"),
            format!("svn co {source_url} {install_path}"),
            format!("# manual: build {app} in {install_path}"),
            format!("touch {}", marker_path(&crate::planner::app_marker(*app))),
        ],
        Operation::EnableMonitor => vec!["iptraf".into(), format!("touch {}", marker_path(MARKER_MONITOR))],
    }
}
