//! Brings up an authorization server, resource servers and an oracle, either
//! in-process on ephemeral ports or from files written by [`init`].

use std::collections::BTreeMap;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Duration;

use seqcap_core::capability::{
    CapError, Certificate, PrincipalKeys, RootAuthority, SignatureAlg, SigningKey, TrustAnchor, UnixSeconds,
};
use seqcap_core::policy::{EsoRegistry, EsoRegistryEntry, PolicyRule, PolicyStore, SubjectAttributes};

use crate::auth_server::{AsSettings, AuthServer};
use crate::clock::Clock;
use crate::config::{AsFileConfig, DeploymentFile, EsoFileConfig, IdentityFiles, Mode, RsFileConfig, RsRoute};
use crate::eso_server::{EsoServer, EsoSettings, SituationEvaluator};
use crate::fixtures;
use crate::http::{serve, RunningServer};
use crate::resource_server::{ResourceServer, RsSettings};
use crate::tls::{https_client, ClientOptions, TlsIdentity, LOCAL_HOSTS};

pub const ROOT_NAME: &str = "resource-owner-root";
pub const AS_ID: &str = "AS";
pub const ESO_ID: &str = "ESO";

#[derive(Debug, thiserror::Error)]
pub enum DeployError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Cap(#[from] CapError),
    #[error(transparent)]
    Http(#[from] reqwest::Error),
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Clone)]
pub struct DeploymentOptions {
    /// Scheme of every token-signing key.
    pub alg: SignatureAlg,
    /// Scheme of the HTTPS server keys.
    pub tls_alg: SignatureAlg,
    pub mode: Mode,
    pub rs_count: usize,
    pub subject_count: usize,
    pub introspect_cache: Option<Duration>,
    /// Directory for counter logs; in-memory counters when `None`.
    pub state_dir: Option<PathBuf>,
    pub policies: Option<Vec<PolicyRule>>,
    pub master_ttl_secs: i64,
}

impl Default for DeploymentOptions {
    fn default() -> Self {
        DeploymentOptions {
            alg: SignatureAlg::EcdsaP256Sha256,
            tls_alg: SignatureAlg::EcdsaP256Sha256,
            mode: Mode::Full,
            rs_count: 3,
            subject_count: 60,
            introspect_cache: None,
            state_dir: None,
            policies: None,
            master_ttl_secs: 86_400,
        }
    }
}

pub fn rs_id(i: usize) -> String {
    format!("RS{}", i + 1)
}

/// Application served by the i-th resource server; the first hosts the payment app.
pub fn application(i: usize) -> String {
    if i == 0 {
        "Payment".into()
    } else {
        format!("App{}", i + 1)
    }
}

fn validity(clock: &Clock) -> (UnixSeconds, UnixSeconds) {
    let now = clock.now();
    (now - 86_400, now + 10 * 365 * 86_400)
}

/// Keys the servers run with.
pub struct ServerKeys {
    pub auth: PrincipalKeys,
    pub eso: PrincipalKeys,
    pub resource_servers: Vec<PrincipalKeys>,
    /// TLS identities by server id.
    pub tls: BTreeMap<String, TlsIdentity>,
}

/// Key material for every principal of a deployment.
pub struct Identities {
    pub root: RootAuthority,
    pub servers: ServerKeys,
    pub clients: BTreeMap<String, PrincipalKeys>,
}

impl Identities {
    pub fn generate(opts: &DeploymentOptions, clock: &Clock) -> Result<Self, CapError> {
        let (nb, na) = validity(clock);
        let root = RootAuthority::generate(ROOT_NAME, nb, na)?;
        let auth = root.enroll(AS_ID, opts.alg, nb, na)?;
        let eso = root.enroll(ESO_ID, opts.alg, nb, na)?;
        let resource_servers = (0..opts.rs_count)
            .map(|i| root.enroll(&rs_id(i), opts.alg, nb, na))
            .collect::<Result<Vec<_>, _>>()?;
        let clients = [fixtures::HONEST_CLIENT, fixtures::ATTACKER]
            .into_iter()
            .map(|c| Ok((c.to_string(), root.enroll(c, opts.alg, nb, na)?)))
            .collect::<Result<BTreeMap<_, _>, CapError>>()?;
        let mut tls = BTreeMap::new();
        let names = [AS_ID.to_string(), ESO_ID.to_string()]
            .into_iter()
            .chain((0..opts.rs_count).map(rs_id));
        for name in names {
            let id = TlsIdentity::issue(&root, &format!("{name}-tls"), opts.tls_alg, &LOCAL_HOSTS, nb, na)?;
            tls.insert(name, id);
        }
        Ok(Identities {
            root,
            servers: ServerKeys {
                auth,
                eso,
                resource_servers,
                tls,
            },
            clients,
        })
    }
}

/// A running deployment.
pub struct Deployment {
    pub clock: Clock,
    pub root: Certificate,
    pub auth: AuthServer,
    pub as_url: String,
    pub resource_servers: Vec<ResourceServer>,
    pub rs_urls: Vec<String>,
    pub eso: EsoServer,
    pub eso_url: String,
    pub clients: BTreeMap<String, PrincipalKeys>,
    pub admin_token: String,
    pub mode: Mode,
    servers: Vec<RunningServer>,
}

fn bind_local() -> std::io::Result<TcpListener> {
    TcpListener::bind("127.0.0.1:0")
}

struct Plan {
    mode: Mode,
    master_ttl_secs: i64,
    policies: Vec<PolicyRule>,
    subjects: Vec<SubjectAttributes>,
    objects: BTreeMap<String, i64>,
    logins: Vec<(String, UnixSeconds)>,
    counter_logs: Vec<Option<PathBuf>>,
    introspect_cache: Option<Duration>,
    admin_token: String,
    public_urls: Option<(String, Vec<String>, String)>,
    /// Registry entries besides the built-in oracle's.
    extra_contexts: Vec<EsoRegistryEntry>,
}

impl Deployment {
    /// Starts everything on 127.0.0.1 with ephemeral ports and fixture data.
    pub async fn start(opts: DeploymentOptions) -> Result<Self, DeployError> {
        if opts.rs_count == 0 {
            return Err(DeployError::Config("at least one resource server is required".into()));
        }
        let clock = Clock::system();
        let ids = Identities::generate(&opts, &clock)?;
        if let Some(dir) = &opts.state_dir {
            std::fs::create_dir_all(dir)?;
        }
        let plan = Plan {
            mode: opts.mode,
            master_ttl_secs: opts.master_ttl_secs,
            policies: opts.policies.clone().unwrap_or_else(|| fixtures::policies(opts.rs_count)),
            subjects: fixtures::subjects(opts.subject_count),
            objects: fixtures::objects(),
            logins: fixtures::logins(clock.now()),
            counter_logs: (0..opts.rs_count)
                .map(|i| opts.state_dir.as_ref().map(|d| d.join(format!("{}.counters", rs_id(i)))))
                .collect(),
            introspect_cache: opts.introspect_cache,
            admin_token: random_token(),
            public_urls: None,
            extra_contexts: Vec::new(),
        };
        let listeners = Listeners {
            auth: bind_local()?,
            eso: bind_local()?,
            rs: (0..opts.rs_count).map(|_| bind_local()).collect::<Result<_, _>>()?,
        };
        let root = ids.root.certificate().clone();
        Self::launch(root, ids.servers, ids.clients, plan, listeners, clock).await
    }

    /// Starts the deployment described by a file written by [`init`].
    pub async fn from_file(path: &Path) -> Result<Self, DeployError> {
        let file = DeploymentFile::load(path).map_err(DeployError::Config)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let at = |p: &Path| base.join(p);
        let read = |p: &Path| std::fs::read_to_string(at(p)).map_err(|e| DeployError::Config(format!("{}: {e}", at(p).display())));
        let load_keys = |files: &IdentityFiles| -> Result<PrincipalKeys, DeployError> {
            let key = SigningKey::from_pkcs8_pem(&read(&files.key)?)?;
            let cert = Certificate::from_pem(&read(&files.cert)?)?;
            Ok(PrincipalKeys::new(key, cert)?)
        };
        let load_tls = |files: &IdentityFiles| -> Result<TlsIdentity, DeployError> {
            Ok(TlsIdentity {
                key_pem: read(&files.key)?,
                cert_pem: read(&files.cert)?,
            })
        };
        let json_err = |e: serde_json::Error| DeployError::Config(e.to_string());
        let root_cert = Certificate::from_pem(&read(&file.root_cert)?)?;

        let mut tls = BTreeMap::new();
        tls.insert(AS_ID.to_string(), load_tls(&file.auth_server.tls)?);
        tls.insert(ESO_ID.to_string(), load_tls(&file.eso_server.tls)?);
        let mut resource_servers = Vec::new();
        for rs in &file.resource_servers {
            tls.insert(rs.id.clone(), load_tls(&rs.tls)?);
            resource_servers.push(load_keys(&rs.identity)?);
        }
        let policies = PolicyStore::load(&at(&file.auth_server.policies))
            .map_err(|e| DeployError::Config(e.to_string()))?
            .all()
            .cloned()
            .collect();
        let subjects: Vec<SubjectAttributes> =
            serde_json::from_str(&read(&file.auth_server.subjects)?).map_err(json_err)?;
        let objects: BTreeMap<String, i64> = match file.resource_servers.first() {
            Some(rs) => serde_json::from_str(&read(&rs.objects)?).map_err(json_err)?,
            None => return Err(DeployError::Config("no resource servers configured".into())),
        };
        let logins: BTreeMap<String, UnixSeconds> =
            serde_json::from_str(&read(&file.eso_server.logins)?).map_err(json_err)?;

        let keys = ServerKeys {
            auth: load_keys(&file.auth_server.identity)?,
            eso: load_keys(&file.eso_server.identity)?,
            resource_servers,
            tls,
        };
        let plan = Plan {
            mode: file.mode,
            master_ttl_secs: file.auth_server.master_ttl_secs,
            policies,
            subjects,
            objects,
            logins: logins.into_iter().collect(),
            counter_logs: file.resource_servers.iter().map(|r| r.counter_log.as_ref().map(|p| at(p))).collect(),
            introspect_cache: file
                .resource_servers
                .first()
                .filter(|r| r.introspect_cache_secs > 0)
                .map(|r| Duration::from_secs(r.introspect_cache_secs)),
            admin_token: file.auth_server.admin_token.clone(),
            extra_contexts: serde_json::from_str(&read(&file.auth_server.eso_registry)?).map_err(json_err)?,
            public_urls: Some((
                file.auth_server.public_url.clone(),
                file.resource_servers.iter().map(|r| r.public_url.clone()).collect(),
                file.eso_server.public_url.clone(),
            )),
        };
        let clients = file
            .clients
            .iter()
            .map(|(id, files)| Ok((id.clone(), load_keys(files)?)))
            .collect::<Result<BTreeMap<_, _>, DeployError>>()?;
        let listeners = Listeners {
            auth: TcpListener::bind(&file.auth_server.listen)?,
            eso: TcpListener::bind(&file.eso_server.listen)?,
            rs: file
                .resource_servers
                .iter()
                .map(|r| TcpListener::bind(&r.listen))
                .collect::<Result<_, _>>()?,
        };
        Self::launch(root_cert, keys, clients, plan, listeners, Clock::system()).await
    }

    async fn launch(
        root: Certificate,
        ids: ServerKeys,
        clients: BTreeMap<String, PrincipalKeys>,
        plan: Plan,
        listeners: Listeners,
        clock: Clock,
    ) -> Result<Self, DeployError> {
        let trust = TrustAnchor::new(root.clone());
        let local = |l: &TcpListener| -> std::io::Result<String> { Ok(format!("https://{}", l.local_addr()?)) };
        let (as_url, rs_urls, eso_url) = match plan.public_urls {
            Some(urls) => urls,
            None => (
                local(&listeners.auth)?,
                listeners.rs.iter().map(local).collect::<Result<_, _>>()?,
                local(&listeners.eso)?,
            ),
        };
        let tls = |name: &str| {
            ids.tls
                .get(name)
                .cloned()
                .ok_or_else(|| DeployError::Config(format!("no TLS identity for {name}")))
        };
        let http = https_client(&root, &ClientOptions::default())?;

        let eso = EsoServer::new(
            EsoSettings {
                trust: trust.clone(),
                authority: ids.auth.certificate().clone(),
                public_url: eso_url.clone(),
                admin_token: plan.admin_token.clone(),
                evaluators: BTreeMap::from([(
                    fixtures::LOGIN_CONTEXT.to_string(),
                    SituationEvaluator::login_history(fixtures::LOGIN_WINDOW_SECS, plan.logins),
                )]),
            },
            clock.clone(),
        );
        let builtin = EsoRegistryEntry {
            context_name: fixtures::LOGIN_CONTEXT.into(),
            eso_url: eso.context_url(fixtures::LOGIN_CONTEXT),
            description: "user logged in within the last 60 days".into(),
        };
        let registry = EsoRegistry::from_entries(std::iter::once(builtin).chain(plan.extra_contexts))
            .map_err(|e| DeployError::Config(e.to_string()))?;

        let routes: Vec<RsRoute> = ids
            .resource_servers
            .iter()
            .zip(&rs_urls)
            .enumerate()
            .map(|(i, (keys, url))| RsRoute {
                id: keys.principal_id().to_string(),
                url: url.clone(),
                application: application(i),
            })
            .collect();
        let auth = AuthServer::new(
            AsSettings {
                keys: ids.auth.clone(),
                trust: trust.clone(),
                public_url: as_url.clone(),
                mode: plan.mode,
                master_ttl_secs: plan.master_ttl_secs,
                eso_ttl_secs: plan.master_ttl_secs,
                admin_token: plan.admin_token.clone(),
                resource_servers: routes,
                policies: PolicyStore::from_rules(plan.policies).map_err(|e| DeployError::Config(e.to_string()))?,
                subjects: plan.subjects,
                registry,
            },
            clock.clone(),
        );

        let mut resource_servers = Vec::new();
        for (keys, log) in ids.resource_servers.iter().zip(plan.counter_logs) {
            resource_servers.push(ResourceServer::new(
                RsSettings {
                    keys: keys.clone(),
                    trust: trust.clone(),
                    authority: ids.auth.certificate().clone(),
                    as_url: as_url.clone(),
                    mode: plan.mode,
                    objects: plan.objects.clone(),
                    counter_log: log,
                    introspect_cache: plan.introspect_cache,
                    eso_timeout: Duration::from_secs(2),
                    http: http.clone(),
                },
                clock.clone(),
            )?);
        }

        let mut servers = vec![
            serve(listeners.auth, &tls(AS_ID)?, auth.router()).await?,
            serve(listeners.eso, &tls(ESO_ID)?, eso.router()).await?,
        ];
        for (rs, listener) in resource_servers.iter().zip(listeners.rs) {
            servers.push(serve(listener, &tls(rs.id())?, rs.router()).await?);
        }
        Ok(Deployment {
            clock,
            root,
            auth,
            as_url,
            resource_servers,
            rs_urls,
            eso,
            eso_url,
            clients,
            admin_token: plan.admin_token,
            mode: plan.mode,
            servers,
        })
    }

    pub fn client(&self, id: &str) -> &PrincipalKeys {
        &self.clients[id]
    }

    pub fn rs(&self, i: usize) -> &ResourceServer {
        &self.resource_servers[i]
    }

    /// HTTPS client trusting this deployment's root.
    pub fn http(&self, opts: &ClientOptions) -> reqwest::Result<reqwest::Client> {
        https_client(&self.root, opts)
    }

    pub async fn shutdown(self) {
        for s in self.servers {
            s.shutdown().await;
        }
    }
}

struct Listeners {
    auth: TcpListener,
    eso: TcpListener,
    rs: Vec<TcpListener>,
}

fn random_token() -> String {
    let bytes: [u8; 16] = rand::random();
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn pretty<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("fixture serializes")
}

/// Writes keys, certificates, fixture data and `deployment.toml` into `dir`.
/// Servers listen on the given base port and up (AS, ESO, then each RS).
pub fn init(dir: &Path, opts: &DeploymentOptions, base_port: u16) -> Result<PathBuf, DeployError> {
    std::fs::create_dir_all(dir)?;
    let clock = Clock::system();
    let ids = Identities::generate(opts, &clock)?;
    let write = |name: &str, text: &str| -> Result<PathBuf, DeployError> {
        std::fs::write(dir.join(name), text)?;
        Ok(PathBuf::from(name))
    };
    let save_keys = |name: &str, keys: &PrincipalKeys| -> Result<IdentityFiles, DeployError> {
        Ok(IdentityFiles {
            key: write(&format!("{name}.key.pem"), &keys.signing_key().to_pkcs8_pem()?)?,
            cert: write(&format!("{name}.cert.pem"), &keys.certificate().to_pem())?,
        })
    };
    let save_tls = |name: &str| -> Result<IdentityFiles, DeployError> {
        let t = &ids.servers.tls[name];
        Ok(IdentityFiles {
            key: write(&format!("{name}-tls.key.pem"), &t.key_pem)?,
            cert: write(&format!("{name}-tls.cert.pem"), &t.cert_pem)?,
        })
    };
    let root_cert = write("root.cert.pem", &ids.root.certificate().to_pem())?;
    write("root.key.pem", &ids.root.key_pem()?)?;
    let mut clients = BTreeMap::new();
    for (id, keys) in &ids.clients {
        clients.insert(id.clone(), save_keys(&format!("client-{id}"), keys)?);
    }
    let policies = PolicyStore::from_rules(opts.policies.clone().unwrap_or_else(|| fixtures::policies(opts.rs_count)))
        .map_err(|e| DeployError::Config(e.to_string()))?;
    let policies = write("policies.json", &policies.to_json())?;
    let subjects = write("subjects.json", &pretty(&fixtures::subjects(opts.subject_count)))?;
    let objects = write("objects.json", &pretty(&fixtures::objects()))?;
    let logins: BTreeMap<String, UnixSeconds> = fixtures::logins(clock.now()).into_iter().collect();
    let logins = write("logins.json", &pretty(&logins))?;
    let registry = write("eso-registry.json", "[]")?;
    let admin_token = random_token();
    let url = |port: u16| format!("https://localhost:{port}");
    let listen = |port: u16| format!("127.0.0.1:{port}");

    let file = DeploymentFile {
        mode: opts.mode,
        root_cert,
        auth_server: AsFileConfig {
            listen: listen(base_port),
            public_url: url(base_port),
            identity: save_keys("as", &ids.servers.auth)?,
            tls: save_tls(AS_ID)?,
            master_ttl_secs: opts.master_ttl_secs,
            eso_ttl_secs: opts.master_ttl_secs,
            policies,
            subjects,
            eso_registry: registry,
            admin_token: admin_token.clone(),
        },
        eso_server: EsoFileConfig {
            listen: listen(base_port + 1),
            public_url: url(base_port + 1),
            identity: save_keys("eso", &ids.servers.eso)?,
            tls: save_tls(ESO_ID)?,
            logins,
            admin_token,
        },
        resource_servers: ids
            .servers
            .resource_servers
            .iter()
            .enumerate()
            .map(|(i, keys)| {
                let port = base_port + 2 + i as u16;
                Ok(RsFileConfig {
                    id: rs_id(i),
                    listen: listen(port),
                    public_url: url(port),
                    application: application(i),
                    identity: save_keys(&rs_id(i).to_lowercase(), keys)?,
                    tls: save_tls(&rs_id(i))?,
                    objects: objects.clone(),
                    counter_log: Some(PathBuf::from(format!("{}.counters", rs_id(i).to_lowercase()))),
                    introspect_cache_secs: 0,
                })
            })
            .collect::<Result<_, DeployError>>()?,
        clients,
    };
    let path = dir.join("deployment.toml");
    file.save(&path).map_err(DeployError::Config)?;
    Ok(path)
}
