//! Fixture for tests that drive the `crag` binary against a live server.
#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use crag_core::crypto::{generate_keypair, KeyKind, KeyPair, PublicKey};
use crag_core::enclave::Measurement;
use crag_core::governance::GovernancePolicy;
use crag_core::rag::{ClientRegistration, ClientScope};
use crag_core::store::ClientId;
use crag_gateway::config::ServerConfig;

pub const BIN: &str = env!("CARGO_BIN_EXE_crag");

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub config: PathBuf,
    pub root_public: PublicKey,
    /// (client id, key file, scope)
    pub clients: Vec<(String, PathBuf)>,
    pub reps: Vec<(String, PathBuf)>,
}

impl Fixture {
    /// Config with a fresh root key, two clients (`member` private scope,
    /// `guest` open scope) and a 2-of-3 representative policy.
    pub fn new(code_identity: &str, k: usize, dim: usize) -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        let root = generate_keypair(KeyKind::Signing, None).unwrap();
        root.write_key_file(&p.join("root.key")).unwrap();

        let mut clients = Vec::new();
        let mut regs = Vec::new();
        for (name, scope) in [("member", ClientScope::Private), ("guest", ClientScope::Open)] {
            let key = generate_keypair(KeyKind::Signing, None).unwrap();
            let path = p.join(format!("{name}.key"));
            key.write_key_file(&path).unwrap();
            regs.push(ClientRegistration { client_id: ClientId::new(name).unwrap(), public: key.public(), scope });
            clients.push((name.to_string(), path));
        }
        std::fs::write(p.join("clients.json"), serde_json::to_string_pretty(&regs).unwrap()).unwrap();

        let mut reps = Vec::new();
        let mut rep_keys = Vec::new();
        for i in 0..3 {
            let key = generate_keypair(KeyKind::Signing, None).unwrap();
            let path = p.join(format!("rep{i}.key"));
            key.write_key_file(&path).unwrap();
            rep_keys.push((format!("rep{i}"), key.public()));
            reps.push((format!("rep{i}"), path));
        }
        let policy = GovernancePolicy::new(rep_keys, 2).unwrap();
        std::fs::write(p.join("policy.json"), policy.to_json()).unwrap();

        let config = p.join("crag.toml");
        std::fs::write(
            &config,
            format!(
                r#"listen = "127.0.0.1:0"
store_path = "store.bin"
audit_path = "audit.jsonl"
registry_path = "registry.json"
governance_policy = "policy.json"
clients_path = "clients.json"
device_secret_path = "device.hex"
root_key_path = "root.key"
root_public = "{}"
code_identity = "{code_identity}"
k = {k}
dim = {dim}
"#,
                root.public().to_hex()
            ),
        )
        .unwrap();
        Fixture { dir, config, root_public: root.public(), clients, reps }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn server_config(&self) -> ServerConfig {
        ServerConfig::load(&self.config).unwrap()
    }

    pub fn measurement(&self) -> Measurement {
        self.server_config().measurement()
    }

    pub fn key(&self, path: &Path) -> KeyPair {
        KeyPair::read_key_file(path).unwrap()
    }

    /// Rewrite one `key = value` line of the config.
    pub fn set(&self, key: &str, value: &str) {
        let text = std::fs::read_to_string(&self.config).unwrap();
        let mut found = false;
        let mut lines: Vec<String> = text
            .lines()
            .map(|l| {
                if l.split('=').next().map(str::trim) == Some(key) {
                    found = true;
                    format!("{key} = {value}")
                } else {
                    l.to_string()
                }
            })
            .collect();
        if !found {
            lines.push(format!("{key} = {value}"));
        }
        std::fs::write(&self.config, lines.join("\n") + "\n").unwrap();
    }

    pub fn spawn(&self) -> Server {
        let log = self.path("server.log");
        let stderr = std::fs::OpenOptions::new().create(true).append(true).open(&log).unwrap();
        let mut child = Command::new(BIN)
            .args(["serve", "--config"])
            .arg(&self.config)
            .env("RUST_LOG", "debug")
            .stdout(Stdio::piped())
            .stderr(stderr)
            .spawn()
            .unwrap();
        let stdout = child.stdout.take().unwrap();
        let mut reader = BufReader::new(stdout);
        let mut line = String::new();
        let deadline = Instant::now() + Duration::from_secs(30);
        let url = loop {
            line.clear();
            let n = reader.read_line(&mut line).unwrap();
            if n == 0 || Instant::now() > deadline {
                let _ = child.kill();
                panic!("server exited before listening: {}", std::fs::read_to_string(&log).unwrap_or_default());
            }
            if let Some(rest) = line.trim().strip_prefix("listening on ") {
                break rest.to_string();
            }
        };
        Server { child, url, _stdout: reader }
    }

    /// Run the CLI with the trust flags and the given client identity.
    pub fn cli(&self, server: &Server, args: &[&str]) -> Output {
        Command::new(BIN)
            .args(args)
            .env("CRAG_SERVER", &server.url)
            .env("CRAG_ROOT_PUBLIC", self.root_public.to_hex())
            .env("CRAG_MEASUREMENT", self.measurement().to_hex())
            .env("RUST_LOG", "debug")
            .output()
            .unwrap()
    }

    pub fn as_client(&self, server: &Server, client: usize, args: &[&str]) -> Output {
        let (id, key) = &self.clients[client];
        Command::new(BIN)
            .args(args)
            .env("CRAG_SERVER", &server.url)
            .env("CRAG_ROOT_PUBLIC", self.root_public.to_hex())
            .env("CRAG_MEASUREMENT", self.measurement().to_hex())
            .env("CRAG_CLIENT_ID", id)
            .env("CRAG_CLIENT_KEY", key)
            .env("RUST_LOG", "debug")
            .output()
            .unwrap()
    }
}

pub fn offline(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("CRAG_SERVER").output().unwrap()
}

pub struct Server {
    pub child: Child,
    pub url: String,
    _stdout: BufReader<std::process::ChildStdout>,
}

impl Server {
    /// SIGTERM, then wait for a clean exit.
    pub fn terminate(mut self) -> std::process::ExitStatus {
        let status = Command::new("kill").args(["-TERM", &self.child.id().to_string()]).status().unwrap();
        assert!(status.success());
        let deadline = Instant::now() + Duration::from_secs(30);
        loop {
            if let Some(s) = self.child.try_wait().unwrap() {
                return s;
            }
            if Instant::now() > deadline {
                let _ = self.child.kill();
                panic!("server did not stop after SIGTERM");
            }
            std::thread::sleep(Duration::from_millis(20));
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}
