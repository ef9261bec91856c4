//! Synthetic IoT traffic with known generating distributions.
//!
//! Every packet of a device is drawn independently from the device's
//! profile: a transport protocol, a service port, a direction, whether the
//! peer is local, and log-normal packet size and inter-arrival time. Because
//! the distributions are known, [`bayes_oracle`] can classify sequences by
//! exact likelihood and gives the accuracy ceiling for any learned model.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{
    app_protocol, port_category, DataPoint, Direction, PacketRecord, Transport, F_APP_PROTO,
    F_DIRECTION, F_DST_INTERNAL, F_INTER_ARRIVAL, F_SERVICE_PORT, F_SIZE, F_SRC_INTERNAL, F_TRANSPORT,
};

const EPHEMERAL_START: u16 = 49152;
const START_TIME: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    pub device_id: String,
    /// Probability of each transport protocol.
    pub transport: BTreeMap<Transport, f64>,
    /// `[port, probability]` pairs; ports must be below 49152.
    pub service_ports: Vec<(u16, f64)>,
    /// Probability that a packet leaves the device.
    pub outbound: f64,
    /// Probability that the remote endpoint is on the internal network.
    pub local_peer: f64,
    /// Log-normal parameters of the packet size in bytes.
    pub size_mu: f64,
    pub size_sigma: f64,
    /// Log-normal parameters of the inter-arrival time in seconds.
    pub iat_mu: f64,
    pub iat_sigma: f64,
    pub sessions: usize,
    pub packets_per_session: usize,
}

fn prob_ok(p: f64) -> bool {
    (0.0..=1.0).contains(&p)
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("profile {}: {m}", self.device_id)));
        let sums_to_one = |it: &mut dyn Iterator<Item = f64>| {
            let v: Vec<f64> = it.collect();
            !v.is_empty() && v.iter().all(|&p| prob_ok(p)) && (v.iter().sum::<f64>() - 1.0).abs() < 1e-9
        };
        if self.device_id.is_empty() || self.device_id.contains(',') {
            return bad("device_id must be non-empty and contain no commas");
        }
        if !sums_to_one(&mut self.transport.values().copied()) {
            return bad("transport probabilities must sum to 1");
        }
        if !sums_to_one(&mut self.service_ports.iter().map(|&(_, p)| p)) {
            return bad("service port probabilities must sum to 1");
        }
        if self.service_ports.iter().any(|&(p, _)| p >= EPHEMERAL_START || p == 0) {
            return bad("service ports must be in 1..49152");
        }
        let mut ports: Vec<u16> = self.service_ports.iter().map(|&(p, _)| p).collect();
        ports.sort_unstable();
        ports.dedup();
        if ports.len() != self.service_ports.len() {
            return bad("duplicate service port");
        }
        if !prob_ok(self.outbound) || !prob_ok(self.local_peer) {
            return bad("outbound and local_peer must be probabilities");
        }
        if !(self.size_sigma > 0.0 && self.iat_sigma > 0.0) {
            return bad("log-normal sigma must be positive");
        }
        if !(self.size_mu.is_finite() && self.iat_mu.is_finite()) {
            return bad("log-normal mu must be finite");
        }
        if self.sessions == 0 || self.packets_per_session == 0 {
            return bad("sessions and packets_per_session must be positive");
        }
        Ok(())
    }

    fn sample_categorical<'a, K: Copy + 'a, R: Rng>(
        table: impl IntoIterator<Item = (&'a K, &'a f64)>,
        rng: &mut R,
    ) -> K {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = None;
        for (&k, &p) in table {
            acc += p;
            last = Some(k);
            if u < acc {
                return k;
            }
        }
        last.expect("non-empty table")
    }
}

/// Profile file: a list of `[[device]]` tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSet {
    #[serde(rename = "device")]
    pub devices: Vec<DeviceProfile>,
}

impl ProfileSet {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let set: ProfileSet =
            toml::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
        set.validate()?;
        Ok(set)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("profiles serialize")
    }

    pub fn validate(&self) -> Result<()> {
        if self.devices.len() < 2 {
            return Err(Error::Invalid("need at least two device profiles".into()));
        }
        let mut ids: Vec<&str> = self.devices.iter().map(|d| d.device_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.devices.len() {
            return Err(Error::Invalid("duplicate device ids".into()));
        }
        self.devices.iter().try_for_each(DeviceProfile::validate)
    }

    /// Same profiles with a different session count and length.
    pub fn with_sessions(mut self, sessions: usize, packets_per_session: usize) -> Self {
        for d in &mut self.devices {
            d.sessions = sessions;
            d.packets_per_session = packets_per_session;
        }
        self
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "separable-12" => Ok(separable_12()),
            "hard-12" => Ok(hard_12()),
            other => Err(Error::Invalid(format!(
                "unknown preset {other:?} (expected separable-12 or hard-12)"
            ))),
        }
    }
}

pub const PRESETS: [&str; 2] = ["separable-12", "hard-12"];

/// Traffic mix shared by several devices: service ports and transport.
struct Mix {
    ports: &'static [(u16, f64)],
    transport: [f64; 3],
    local_peer: f64,
}

const MIXES: [Mix; 4] = [
    Mix {
        ports: &[(53, 0.5), (123, 0.3), (443, 0.2)],
        transport: [0.2, 0.8, 0.0],
        local_peer: 0.1,
    },
    Mix {
        ports: &[(443, 0.85), (53, 0.15)],
        transport: [0.9, 0.1, 0.0],
        local_peer: 0.05,
    },
    Mix {
        ports: &[(1883, 0.8), (53, 0.2)],
        transport: [0.9, 0.1, 0.0],
        local_peer: 0.2,
    },
    Mix {
        ports: &[(80, 0.6), (5353, 0.2), (67, 0.2)],
        transport: [0.6, 0.35, 0.05],
        local_peer: 0.6,
    },
];

/// `(mix, size level, inter-arrival level, outbound level)` per device. Every
/// level of every trait is shared by several devices, so devices held out
/// as unseen still share traits with seen ones.
const LAYOUT: [(usize, usize, usize, usize); 12] = [
    (0, 0, 2, 2),
    (0, 1, 0, 1),
    (0, 2, 1, 0),
    (1, 0, 1, 1),
    (1, 1, 2, 0),
    (1, 2, 0, 2),
    (2, 0, 0, 0),
    (2, 1, 1, 2),
    (2, 2, 2, 1),
    (3, 0, 2, 1),
    (3, 1, 0, 2),
    (3, 2, 1, 0),
];

struct Levels {
    size_mu: [f64; 3],
    size_sigma: f64,
    iat_mu: [f64; 3],
    iat_sigma: f64,
    outbound: [f64; 3],
    /// Weight of the device's own mix; the rest is a mix shared by all devices.
    mix_weight: f64,
}

fn build(levels: &Levels, sessions: usize, packets: usize) -> ProfileSet {
    let shared = |k: usize| -> (BTreeMap<u16, f64>, [f64; 3]) {
        let mut ports = BTreeMap::new();
        let mut transport = [0.0; 3];
        let w = levels.mix_weight;
        for (j, mix) in MIXES.iter().enumerate() {
            let weight = if j == k { w + (1.0 - w) / 4.0 } else { (1.0 - w) / 4.0 };
            for &(p, q) in mix.ports {
                *ports.entry(p).or_insert(0.0) += weight * q;
            }
            for (t, q) in transport.iter_mut().zip(mix.transport) {
                *t += weight * q;
            }
        }
        (ports, transport)
    };
    let devices = LAYOUT
        .iter()
        .enumerate()
        .map(|(i, &(mix, size, iat, out))| {
            let (service_ports, t) = shared(mix);
            let transport = [Transport::Tcp, Transport::Udp, Transport::Other]
                .into_iter()
                .zip(t)
                .filter(|&(_, p)| p > 0.0)
                .collect();
            DeviceProfile {
                device_id: format!("dev{i:02}"),
                transport,
                service_ports: service_ports.into_iter().collect(),
                outbound: levels.outbound[out],
                local_peer: MIXES[mix].local_peer,
                size_mu: levels.size_mu[size],
                size_sigma: levels.size_sigma,
                iat_mu: levels.iat_mu[iat],
                iat_sigma: levels.iat_sigma,
                sessions,
                packets_per_session: packets,
            }
        })
        .collect();
    normalize(ProfileSet { devices })
}

/// Rescales categorical tables so they sum to exactly one.
fn normalize(mut set: ProfileSet) -> ProfileSet {
    for d in &mut set.devices {
        let s: f64 = d.service_ports.iter().map(|&(_, p)| p).sum();
        d.service_ports.iter_mut().for_each(|(_, p)| *p /= s);
        let s: f64 = d.transport.values().sum();
        d.transport.values_mut().for_each(|p| *p /= s);
    }
    set
}

/// Twelve clearly distinct devices: near-perfect Bayes accuracy at n = 200.
pub fn separable_12() -> ProfileSet {
    build(
        &Levels {
            size_mu: [90f64.ln(), 350f64.ln(), 1100f64.ln()],
            size_sigma: 0.3,
            iat_mu: [0.02f64.ln(), 0.2f64.ln(), 2f64.ln()],
            iat_sigma: 0.5,
            outbound: [0.3, 0.5, 0.7],
            mix_weight: 1.0,
        },
        200,
        200,
    )
}

/// Twelve overlapping devices: same trait layout, closer levels and a
/// large shared traffic component.
pub fn hard_12() -> ProfileSet {
    build(
        &Levels {
            size_mu: [250f64.ln(), 300f64.ln(), 360f64.ln()],
            size_sigma: 0.6,
            iat_mu: [0.15f64.ln(), 0.2f64.ln(), 0.27f64.ln()],
            iat_sigma: 1.0,
            outbound: [0.45, 0.5, 0.55],
            mix_weight: 0.25,
        },
        300,
        50,
    )
}

fn device_records(profile: &DeviceProfile, rng: &mut ChaCha8Rng) -> Vec<PacketRecord> {
    let size = LogNormal::new(profile.size_mu, profile.size_sigma).expect("validated");
    let iat = LogNormal::new(profile.iat_mu, profile.iat_sigma).expect("validated");
    let total = profile.sessions * profile.packets_per_session;
    let mut out = Vec::with_capacity(total);
    // microsecond clock so the CSV round trip is exact
    let mut clock_us: u64 = 0;
    for k in 0..total {
        if k > 0 {
            let dt: f64 = iat.sample(rng);
            clock_us += ((dt * 1e6).round() as u64).max(1);
        }
        let transport = DeviceProfile::sample_categorical(&profile.transport, rng);
        let port =
            DeviceProfile::sample_categorical(profile.service_ports.iter().map(|(k, p)| (k, p)), rng);
        let outbound = rng.random::<f64>() < profile.outbound;
        let local = rng.random::<f64>() < profile.local_peer;
        let ephemeral = rng.random_range(EPHEMERAL_START..=u16::MAX);
        let bytes: f64 = size.sample(rng);
        let (src_port, dst_port, src_internal, dst_internal, direction) = if outbound {
            (ephemeral, port, true, local, Direction::Outbound)
        } else {
            (port, ephemeral, local, true, Direction::Inbound)
        };
        out.push(PacketRecord {
            timestamp: START_TIME + clock_us as f64 * 1e-6,
            src_port,
            dst_port,
            src_internal,
            dst_internal,
            transport,
            size: (bytes.round() as u32).clamp(1, 65535),
            direction,
            device_id: profile.device_id.clone(),
        });
    }
    out
}

/// Generates packet records for every profile, grouped by device in
/// profile order. Each device draws from its own stream of `seed`.
pub fn generate(profiles: &ProfileSet, seed: u64) -> Result<Vec<PacketRecord>> {
    profiles.validate()?;
    let mut out = Vec::new();
    for (i, p) in profiles.devices.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        out.extend(device_records(p, &mut rng));
    }
    Ok(out)
}

/// Writes generated traffic in the packet CSV schema.
pub fn generate_csv<W: std::io::Write>(profiles: &ProfileSet, seed: u64, writer: W) -> Result<()> {
    crate::ingest::write_packet_csv(writer, &generate(profiles, seed)?)
}

// ---- Bayes oracle ----

/// Per-packet log-likelihood tables of one profile in feature space.
struct PacketModel {
    transport: [f64; 3],
    /// `(service port category, app protocol) -> log probability`.
    port: BTreeMap<(u8, u8), f64>,
    outbound: f64,
    local_peer: f64,
    size_mu: f64,
    size_sigma: f64,
    iat_mu: f64,
    iat_sigma: f64,
}

fn ln_or_neg_inf(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        f64::NEG_INFINITY
    }
}

fn lognormal_logpdf(x: f64, mu: f64, sigma: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let z = (x.ln() - mu) / sigma;
    -0.5 * z * z - x.ln() - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

impl PacketModel {
    fn new(p: &DeviceProfile) -> Self {
        let mut transport = [f64::NEG_INFINITY; 3];
        for (t, &q) in &p.transport {
            transport[t.code() as usize] = ln_or_neg_inf(q);
        }
        let mut joint: BTreeMap<(u8, u8), f64> = BTreeMap::new();
        for &(port, q) in &p.service_ports {
            *joint
                .entry((port_category::of(port), app_protocol::of(port)))
                .or_insert(0.0) += q;
        }
        PacketModel {
            transport,
            port: joint.into_iter().map(|(k, q)| (k, ln_or_neg_inf(q))).collect(),
            outbound: p.outbound,
            local_peer: p.local_peer,
            size_mu: p.size_mu,
            size_sigma: p.size_sigma,
            iat_mu: p.iat_mu,
            iat_sigma: p.iat_sigma,
        }
    }

    fn log_likelihood(&self, row: &[f32]) -> f64 {
        let outbound = row[F_DIRECTION] > 0.5;
        let src_int = row[F_SRC_INTERNAL] > 0.5;
        let dst_int = row[F_DST_INTERNAL] > 0.5;
        let local = if outbound { dst_int } else { src_int };
        let mut ll = ln_or_neg_inf(if outbound { self.outbound } else { 1.0 - self.outbound });
        ll += ln_or_neg_inf(if local { self.local_peer } else { 1.0 - self.local_peer });
        ll += self.transport.get(row[F_TRANSPORT] as usize).copied().unwrap_or(f64::NEG_INFINITY);
        ll += self
            .port
            .get(&(row[F_SERVICE_PORT] as u8, row[F_APP_PROTO] as u8))
            .copied()
            .unwrap_or(f64::NEG_INFINITY);
        ll += lognormal_logpdf(f64::from(row[F_SIZE]), self.size_mu, self.size_sigma);
        // the first packet of a stream has no inter-arrival time
        if row[F_INTER_ARRIVAL] > 0.0 {
            ll += lognormal_logpdf(f64::from(row[F_INTER_ARRIVAL]), self.iat_mu, self.iat_sigma);
        }
        ll
    }
}

/// Maximum-likelihood device for each raw (un-normalized) sequence. The
/// returned index is the profile's position in `profiles`.
pub fn bayes_classify(profiles: &ProfileSet, points: &[DataPoint]) -> Vec<usize> {
    let models: Vec<PacketModel> = profiles.devices.iter().map(PacketModel::new).collect();
    points
        .iter()
        .map(|p| {
            let scores: Vec<f64> = models
                .iter()
                .map(|m| {
                    (0..p.features.rows())
                        .map(|i| m.log_likelihood(p.features.row(i)))
                        .sum::<f64>()
                })
                .collect();
            let mut best = 0;
            for (i, &s) in scores.iter().enumerate() {
                if s > scores[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Accuracy of [`bayes_classify`] against the points' labels, which must be
/// profile indices.
pub fn bayes_oracle(profiles: &ProfileSet, points: &[DataPoint]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let predicted = bayes_classify(profiles, points);
    let correct = predicted
        .iter()
        .zip(points)
        .filter(|(&p, pt)| pt.label == Some(p))
        .count();
    correct as f64 / points.len() as f64
}
