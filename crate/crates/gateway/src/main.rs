use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use crag_core::audit::{verify_jsonl, Actor};
use crag_core::crypto::{Digest, KeyKind, KeyPair, PublicKey};
use crag_core::enclave::{AttestationReport, Enclave, Measurement};
use crag_core::governance::{sign_approval, GovernancePolicy, Operation};
use crag_core::rag::SubmitAction;
use crag_core::registry::ArtifactRegistry;
use crag_core::store::{ClientId, RecordId, Visibility};
use crag_gateway::api::{op_params, params_digest, ExecuteRequest, OpArgs, ProposeRequest};
use crag_gateway::client::{Client, ClientError, VerifiedEnclave};
use crag_gateway::config::{config_path, ServerConfig};
use crag_gateway::node::Node;

const EXIT_OTHER: u8 = 1;
const EXIT_VERIFY: u8 = 2;
const EXIT_REFUSED: u8 = 3;
const EXIT_STARTUP: u8 = 4;

/// Failure carrying the process exit code.
struct Fail(u8, String);

impl Fail {
    fn other(e: impl std::fmt::Display) -> Self {
        Fail(EXIT_OTHER, e.to_string())
    }

    fn verify(e: impl std::fmt::Display) -> Self {
        Fail(EXIT_VERIFY, e.to_string())
    }
}

impl From<ClientError> for Fail {
    fn from(e: ClientError) -> Self {
        let code = match &e {
            ClientError::Attestation(_) | ClientError::Response(_) => EXIT_VERIFY,
            ClientError::Server { status: 403, .. } => EXIT_REFUSED,
            _ => EXIT_OTHER,
        };
        Fail(code, e.to_string())
    }
}

type Out = Result<(), Fail>;

#[derive(Parser)]
#[command(name = "crag", version, about = "Confidential community retrieval-augmented generation node")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Server config file; falls back to $CRAG_CONFIG, then ./crag.toml.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<ServerConfig, Fail> {
        let path = config_path(self.config.clone());
        ServerConfig::load(&path).map_err(|e| Fail(EXIT_STARTUP, format!("{}: {e}", path.display())))
    }
}

#[derive(Args, Clone)]
struct Remote {
    #[arg(long, env = "CRAG_SERVER", default_value = "http://127.0.0.1:8700")]
    server: String,
}

#[derive(Args, Clone)]
struct Trust {
    #[command(flatten)]
    remote: Remote,
    /// Attestation root public key (hex).
    #[arg(long, env = "CRAG_ROOT_PUBLIC", value_parser = parse_public)]
    root_public: PublicKey,
    /// Expected enclave measurement (hex).
    #[arg(long, env = "CRAG_MEASUREMENT", value_parser = parse_measurement)]
    measurement: Measurement,
}

impl Trust {
    fn connect(&self) -> Result<(Client, VerifiedEnclave), Fail> {
        let client = Client::new(&self.remote.server);
        let enclave = client.verified_enclave(&self.root_public, &self.measurement)?;
        Ok((client, enclave))
    }
}

#[derive(Args, Clone)]
struct Identity {
    #[arg(long, env = "CRAG_CLIENT_ID")]
    client_id: String,
    /// Client signing key file.
    #[arg(long, env = "CRAG_CLIENT_KEY")]
    key: PathBuf,
}

impl Identity {
    fn load(&self) -> Result<(ClientId, KeyPair), Fail> {
        let id = ClientId::new(&self.client_id).map_err(Fail::other)?;
        let key = KeyPair::read_key_file(&self.key).map_err(Fail::other)?;
        Ok((id, key))
    }
}

#[derive(Args, Clone, Default)]
struct OpArgsCli {
    #[arg(long)]
    record_id: Option<String>,
    /// Recipient agreement key (hex) for extract-record.
    #[arg(long, value_parser = parse_public)]
    recipient: Option<PublicKey>,
    /// Rule pack file for change-rules.
    #[arg(long)]
    rules_file: Option<PathBuf>,
    /// Policy JSON file for rotate-policy.
    #[arg(long)]
    policy_file: Option<PathBuf>,
}

impl OpArgsCli {
    fn is_empty(&self) -> bool {
        self.record_id.is_none() && self.recipient.is_none() && self.rules_file.is_none() && self.policy_file.is_none()
    }

    fn resolve(&self) -> Result<OpArgs, Fail> {
        let rules = self.rules_file.as_deref().map(std::fs::read_to_string).transpose().map_err(Fail::other)?;
        let policy = self.policy_file.as_deref().map(GovernancePolicy::load).transpose().map_err(Fail::other)?;
        Ok(OpArgs { record_id: self.record_id.clone(), recipient: self.recipient, rules, policy })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP server.
    Serve {
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Generate a key file and print its public key.
    Keygen {
        #[arg(long, value_parser = parse_kind, default_value = "signing")]
        kind: KeyKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fetch the enclave public key after verifying its attestation.
    ExportPk {
        #[command(flatten)]
        trust: Trust,
    },
    /// Verify the server's attestation and print its identity.
    Attest {
        #[command(flatten)]
        trust: Trust,
    },
    /// Print the measurement the configured enclave will have.
    Measure {
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Submit a new record.
    Ingest(SubmitArgs),
    /// Replace the text of a record you contributed.
    Update(SubmitArgs),
    /// Ask a question.
    Query {
        #[command(flatten)]
        trust: Trust,
        #[command(flatten)]
        identity: Identity,
        #[arg(long)]
        prompt: String,
        /// Private context sent with the query and never stored.
        #[arg(long)]
        context: Option<String>,
        /// Print the response as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Verify an audit log file.
    AuditVerify {
        #[arg(long)]
        log: PathBuf,
        /// Enclave audit signing key (hex); derived from the config when absent.
        #[arg(long, value_parser = parse_public)]
        signing_public: Option<PublicKey>,
        #[command(flatten)]
        config: ConfigArg,
    },
    #[command(subcommand)]
    Registry(RegistryCommand),
    #[command(subcommand)]
    Govern(GovernCommand),
}

#[derive(Args)]
struct SubmitArgs {
    #[command(flatten)]
    trust: Trust,
    #[command(flatten)]
    identity: Identity,
    #[arg(long)]
    id: String,
    #[arg(long, conflicts_with = "file")]
    text: Option<String>,
    /// Read the text from a file, or stdin for `-`.
    #[arg(long)]
    file: Option<PathBuf>,
    #[arg(long, value_parser = parse_visibility, default_value = "open")]
    visibility: Visibility,
}

#[derive(Subcommand)]
enum RegistryCommand {
    /// Record the measurement of a released artifact.
    Register {
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        name: String,
        #[arg(long)]
        version: String,
        /// Measurement (hex); computed from --config when absent.
        #[arg(long, value_parser = parse_measurement)]
        measurement: Option<Measurement>,
        #[arg(long, value_parser = parse_digest)]
        eval_digest: Option<Digest>,
        #[arg(long, default_value = "operator")]
        actor: String,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Check a deployment against the registry.
    Check {
        /// Ask a running server to check itself.
        #[arg(long, env = "CRAG_SERVER", conflicts_with_all = ["registry", "report"])]
        server: Option<String>,
        #[arg(long, requires_all = ["report", "root_public"])]
        registry: Option<PathBuf>,
        /// Attestation report file (hex).
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_parser = parse_public)]
        root_public: Option<PublicKey>,
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        version: Option<String>,
    },
}

#[derive(Subcommand)]
enum GovernCommand {
    /// Open a proposal for a governed operation.
    Propose {
        #[command(flatten)]
        remote: Remote,
        #[arg(long, value_parser = parse_operation)]
        operation: Operation,
        #[command(flatten)]
        args: OpArgsCli,
        #[arg(long, default_value = "operator")]
        actor: String,
    },
    /// Sign and submit an approval as a representative.
    Approve {
        #[command(flatten)]
        remote: Remote,
        #[arg(long)]
        proposal_id: String,
        #[arg(long)]
        rep_id: String,
        #[arg(long)]
        key: PathBuf,
        /// When given, the proposal must cover exactly these arguments.
        #[command(flatten)]
        args: OpArgsCli,
    },
    /// Execute a proposal with the approvals collected by the server.
    Execute {
        #[command(flatten)]
        remote: Remote,
        #[arg(long)]
        proposal_id: String,
        #[command(flatten)]
        args: OpArgsCli,
    },
}

fn parse_public(s: &str) -> Result<PublicKey, String> {
    PublicKey::from_hex(s).map_err(|e| e.to_string())
}

fn parse_measurement(s: &str) -> Result<Measurement, String> {
    Measurement::from_hex(s).map_err(|e| e.to_string())
}

fn parse_digest(s: &str) -> Result<Digest, String> {
    Digest::from_hex(s).map_err(|e| e.to_string())
}

fn parse_kind(s: &str) -> Result<KeyKind, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| "expected signing or agreement".into())
}

fn parse_visibility(s: &str) -> Result<Visibility, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| "expected private or open".into())
}

fn parse_operation(s: &str) -> Result<Operation, String> {
    Operation::parse(s).ok_or_else(|| format!("unknown operation {s}"))
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("output serializes"));
}

fn serve(config: &ConfigArg) -> Out {
    let cfg = config.load()?;
    let addr = cfg.listen.parse().map_err(|e| Fail(EXIT_STARTUP, format!("listen address: {e}")))?;
    let node = Node::start(cfg).map_err(|e| Fail(EXIT_STARTUP, e.to_string()))?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(Fail::other)?;
    rt.block_on(crag_gateway::server::serve(Arc::new(node), addr)).map_err(|e| Fail(EXIT_STARTUP, e.to_string()))
}

fn read_text(text: &Option<String>, file: &Option<PathBuf>) -> Result<String, Fail> {
    match (text, file) {
        (Some(t), _) => Ok(t.clone()),
        (None, Some(p)) if p == Path::new("-") => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s).map_err(Fail::other)?;
            Ok(s)
        }
        (None, Some(p)) => std::fs::read_to_string(p).map_err(Fail::other),
        (None, None) => Err(Fail::other("one of --text or --file is required")),
    }
}

fn submit(a: &SubmitArgs, action: SubmitAction) -> Out {
    let (client, enclave) = a.trust.connect()?;
    let (id, key) = a.identity.load()?;
    let record_id = RecordId::new(&a.id).map_err(Fail::other)?;
    let text = read_text(&a.text, &a.file)?;
    let receipt = client.submit(&enclave, &id, &key, action, &record_id, &text, a.visibility)?;
    print_json(&receipt);
    Ok(())
}

fn audit_signing_key(config: &ConfigArg) -> Result<PublicKey, Fail> {
    let cfg = config.load()?;
    let text = std::fs::read_to_string(&cfg.device_secret_path).map_err(Fail::other)?;
    let secret: [u8; 32] = hex::decode(text.trim())
        .ok()
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Fail::other("device secret must be 32 hex bytes"))?;
    let enclave = Enclave::boot(cfg.code_identity.as_bytes(), cfg.enclave_config().as_bytes(), &secret)
        .map_err(Fail::other)?;
    Ok(enclave.signing_public())
}

fn registry(cmd: &RegistryCommand) -> Out {
    match cmd {
        RegistryCommand::Register { registry, name, version, measurement, eval_digest, actor, config } => {
            let measurement = match measurement {
                Some(m) => *m,
                None => config.load()?.measurement(),
            };
            let actor = Actor::new(actor).map_err(Fail::other)?;
            let reg = ArtifactRegistry::open(registry, None).map_err(Fail::other)?;
            let rec = reg.register(name, version, measurement, *eval_digest, &actor).map_err(Fail::other)?;
            print_json(&rec);
            Ok(())
        }
        RegistryCommand::Check { server, registry, report, root_public, name, version } => {
            let (healthy, out) = match (server, registry) {
                (_, Some(path)) => {
                    let name = name.as_deref().ok_or_else(|| Fail::other("--name is required"))?;
                    let version = version.as_deref().ok_or_else(|| Fail::other("--version is required"))?;
                    let report_path = report.as_ref().expect("required by clap");
                    let text = std::fs::read_to_string(report_path).map_err(Fail::other)?;
                    let report = AttestationReport::from_hex(&text).map_err(Fail::verify)?;
                    let reg = ArtifactRegistry::open(path, None).map_err(Fail::other)?;
                    let root = root_public.expect("required by clap");
                    let check = reg.check_deployment(name, version, &report, &root).map_err(Fail::other)?;
                    let out = serde_json::json!({ "name": name, "version": version, "check": check });
                    (check.is_healthy(), out)
                }
                (server, None) => {
                    let base = server.clone().unwrap_or_else(|| "http://127.0.0.1:8700".into());
                    let resp = Client::new(&base).registry_check(name.as_deref(), version.as_deref())?;
                    (resp.check.is_healthy(), serde_json::to_value(&resp).expect("serializes"))
                }
            };
            print_json(&out);
            if healthy {
                Ok(())
            } else {
                Err(Fail::verify("deployment does not match the registry"))
            }
        }
    }
}

fn govern(cmd: &GovernCommand) -> Out {
    match cmd {
        GovernCommand::Propose { remote, operation, args, actor } => {
            let params = op_params(*operation, &args.resolve()?).map_err(Fail::other)?;
            let req = ProposeRequest {
                operation: *operation,
                params: params.into_iter().map(|(k, v)| (k, hex::encode(v))).collect(),
                actor: actor.clone(),
            };
            print_json(&Client::new(&remote.server).propose(&req)?);
            Ok(())
        }
        GovernCommand::Approve { remote, proposal_id, rep_id, key, args } => {
            let client = Client::new(&remote.server);
            let proposal = client.proposal(proposal_id)?;
            if !args.is_empty() {
                let params = op_params(proposal.operation, &args.resolve()?).map_err(Fail::other)?;
                if params_digest(proposal.operation, &params) != proposal.payload_digest {
                    return Err(Fail::verify("proposal does not cover the given arguments"));
                }
            }
            let key = KeyPair::read_key_file(key).map_err(Fail::other)?;
            let approval = sign_approval(&proposal, rep_id, &key).map_err(Fail::other)?;
            client.approve(&approval)?;
            eprintln!("approved {} ({}) as {rep_id}", proposal.proposal_id, proposal.operation);
            Ok(())
        }
        GovernCommand::Execute { remote, proposal_id, args } => {
            let req = ExecuteRequest { proposal_id: proposal_id.clone(), approvals: None, args: args.resolve()? };
            print_json(&Client::new(&remote.server).execute(&req)?);
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Out {
    match cli.command {
        Command::Serve { config } => serve(&config),
        Command::Keygen { kind, out } => {
            let key = KeyPair::generate(kind, None).map_err(Fail::other)?;
            key.write_key_file(&out).map_err(Fail::other)?;
            println!("{}", key.public().to_hex());
            Ok(())
        }
        Command::ExportPk { trust } => {
            let (_, enclave) = trust.connect()?;
            println!("{}", enclave.pk_tee.to_hex());
            Ok(())
        }
        Command::Attest { trust } => {
            let client = Client::new(&trust.remote.server);
            client.verified_enclave(&trust.root_public, &trust.measurement)?;
            print_json(&client.attestation()?);
            Ok(())
        }
        Command::Measure { config } => {
            println!("{}", config.load()?.measurement().to_hex());
            Ok(())
        }
        Command::Ingest(a) => submit(&a, SubmitAction::Ingest),
        Command::Update(a) => submit(&a, SubmitAction::Update),
        Command::Query { trust, identity, prompt, context, json } => {
            let (client, enclave) = trust.connect()?;
            let (id, key) = identity.load()?;
            let (resp, qd) = client.query(&enclave, &id, &key, &prompt, context.as_deref())?;
            if json {
                print_json(&serde_json::json!({
                    "query_digest": qd,
                    "text": resp.text,
                    "provenance": resp.provenance,
                    "generator_id": resp.generator_id,
                }));
            } else {
                println!("{}", resp.text);
                let ids: Vec<&str> = resp.provenance.iter().map(|r| r.as_str()).collect();
                println!("sources: {}", ids.join(", "));
            }
            Ok(())
        }
        Command::AuditVerify { log, signing_public, config } => {
            let key = match signing_public {
                Some(k) => k,
                None => audit_signing_key(&config)?,
            };
            let text = std::fs::read_to_string(&log).map_err(Fail::other)?;
            let verdict = verify_jsonl(&text, &key);
            print_json(&verdict);
            if verdict.valid {
                Ok(())
            } else {
                Err(Fail::verify("audit chain is invalid"))
            }
        }
        Command::Registry(cmd) => registry(&cmd),
        Command::Govern(cmd) => govern(&cmd),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
