//! Packet trace ingestion: CSV parsing, per-packet featurization, fixed-length
//! segmentation, normalization, and seen/unseen partitioning.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Raw features per packet.
pub const FEATURES: usize = 8;

pub const F_SRC_INTERNAL: usize = 0;
pub const F_DST_INTERNAL: usize = 1;
pub const F_SERVICE_PORT: usize = 2;
pub const F_TRANSPORT: usize = 3;
pub const F_APP_PROTO: usize = 4;
pub const F_INTER_ARRIVAL: usize = 5;
pub const F_SIZE: usize = 6;
pub const F_DIRECTION: usize = 7;

/// Fraction of malformed rows above which ingestion aborts.
pub const MAX_SKIP_FRACTION: f64 = 0.01;

pub const CSV_HEADER: [&str; 9] = [
    "timestamp",
    "src_port",
    "dst_port",
    "src_internal",
    "dst_internal",
    "proto",
    "size",
    "direction",
    "device_id",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    Tcp,
    Udp,
    Other,
}

impl Transport {
    pub fn code(self) -> u8 {
        match self {
            Transport::Tcp => 0,
            Transport::Udp => 1,
            Transport::Other => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Transport::Tcp => "tcp",
            Transport::Udp => "udp",
            Transport::Other => "other",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "tcp" => Some(Transport::Tcp),
            "udp" => Some(Transport::Udp),
            "other" => Some(Transport::Other),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Inbound,
    Outbound,
}

impl Direction {
    pub fn code(self) -> u8 {
        match self {
            Direction::Inbound => 0,
            Direction::Outbound => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Inbound => "in",
            Direction::Outbound => "out",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "in" => Some(Direction::Inbound),
            "out" => Some(Direction::Outbound),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PacketRecord {
    pub timestamp: f64,
    pub src_port: u16,
    pub dst_port: u16,
    pub src_internal: bool,
    pub dst_internal: bool,
    pub transport: Transport,
    pub size: u32,
    pub direction: Direction,
    pub device_id: String,
}

/// Category codes for the service port. Well-known protocols get their own
/// code; everything else is bucketed by IANA range.
pub mod port_category {
    pub const DNS: u8 = 1;
    pub const NTP: u8 = 2;
    pub const HTTP: u8 = 3;
    pub const HTTPS: u8 = 4;
    pub const MQTT: u8 = 5;
    pub const MDNS: u8 = 6;
    pub const DHCP: u8 = 7;
    pub const SYSTEM: u8 = 8;
    pub const REGISTERED: u8 = 9;
    pub const DYNAMIC: u8 = 10;

    pub fn of(port: u16) -> u8 {
        match port {
            53 => DNS,
            123 => NTP,
            80 => HTTP,
            443 => HTTPS,
            1883 => MQTT,
            5353 => MDNS,
            67 | 68 => DHCP,
            0..=1023 => SYSTEM,
            1024..=49151 => REGISTERED,
            _ => DYNAMIC,
        }
    }
}

/// Application-protocol codes derived from the service port.
pub mod app_protocol {
    pub const OTHER: u8 = 0;
    pub const DNS: u8 = 1;
    pub const NTP: u8 = 2;
    pub const HTTP: u8 = 3;
    pub const HTTPS: u8 = 4;
    pub const MQTT: u8 = 5;

    pub fn of(port: u16) -> u8 {
        match port {
            53 | 5353 => DNS,
            123 => NTP,
            80 | 8080 => HTTP,
            443 | 8443 => HTTPS,
            1883 | 8883 => MQTT,
            _ => OTHER,
        }
    }
}

/// The lower of the two ports; the other side is treated as ephemeral and
/// not represented.
pub fn service_port(r: &PacketRecord) -> u16 {
    r.src_port.min(r.dst_port)
}

// ---- CSV ----

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedRow {
    /// 1-based line number in the file (header is line 1).
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedTrace {
    pub records: Vec<PacketRecord>,
    pub skipped: Vec<SkippedRow>,
}

impl ParsedTrace {
    pub fn total_rows(&self) -> usize {
        self.records.len() + self.skipped.len()
    }

    /// Fails when more than `max_fraction` of the data rows were malformed.
    pub fn ensure_skip_rate(&self, max_fraction: f64) -> Result<()> {
        let total = self.total_rows();
        if total > 0 && self.skipped.len() as f64 > max_fraction * total as f64 {
            return Err(Error::TooManySkipped {
                skipped: self.skipped.len(),
                total,
            });
        }
        Ok(())
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "0" => Some(false),
        "1" => Some(true),
        _ => None,
    }
}

fn parse_row(row: &csv::StringRecord) -> std::result::Result<PacketRecord, String> {
    if row.len() != CSV_HEADER.len() {
        return Err(format!("expected {} fields, got {}", CSV_HEADER.len(), row.len()));
    }
    let field = |i: usize| row.get(i).unwrap_or("").trim();
    let timestamp: f64 = field(0).parse().map_err(|_| format!("bad timestamp {:?}", field(0)))?;
    if !timestamp.is_finite() {
        return Err("non-finite timestamp".into());
    }
    let port = |i: usize| -> std::result::Result<u16, String> {
        let v: u64 = field(i).parse().map_err(|_| format!("bad port {:?}", field(i)))?;
        u16::try_from(v).map_err(|_| format!("port {v} out of range"))
    };
    let src_port = port(1)?;
    let dst_port = port(2)?;
    let src_internal = parse_bool(field(3)).ok_or("bad src_internal")?;
    let dst_internal = parse_bool(field(4)).ok_or("bad dst_internal")?;
    let transport = Transport::parse(field(5)).ok_or_else(|| format!("bad proto {:?}", field(5)))?;
    let size: u32 = field(6).parse().map_err(|_| format!("bad size {:?}", field(6)))?;
    let direction =
        Direction::parse(field(7)).ok_or_else(|| format!("bad direction {:?}", field(7)))?;
    let device_id = field(8);
    if device_id.is_empty() {
        return Err("empty device_id".into());
    }
    Ok(PacketRecord {
        timestamp,
        src_port,
        dst_port,
        src_internal,
        dst_internal,
        transport,
        size,
        direction,
        device_id: device_id.to_string(),
    })
}

/// Parses a packet CSV from any reader. Malformed rows are skipped and
/// reported, never silently dropped.
pub fn parse_packet_csv_reader<R: Read>(reader: R) -> Result<ParsedTrace> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names != CSV_HEADER {
        return Err(Error::Invalid(format!(
            "packet csv header {:?} does not match {:?}",
            names, CSV_HEADER
        )));
    }
    let mut out = ParsedTrace::default();
    for (i, row) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let parsed = row
            .map_err(|e| e.to_string())
            .and_then(|row| parse_row(&row));
        match parsed {
            Ok(rec) => out.records.push(rec),
            Err(reason) => {
                log::warn!("skipping packet csv line {line}: {reason}");
                out.skipped.push(SkippedRow { line, reason });
            }
        }
    }
    Ok(out)
}

pub fn parse_packet_csv(path: &Path) -> Result<ParsedTrace> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_packet_csv_reader(std::io::BufReader::new(file))
}

/// Writes records in the packet CSV schema. Timestamps are written with
/// microsecond precision.
pub fn write_packet_csv<W: std::io::Write>(writer: W, records: &[PacketRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record([
            format!("{:.6}", r.timestamp),
            r.src_port.to_string(),
            r.dst_port.to_string(),
            u8::from(r.src_internal).to_string(),
            u8::from(r.dst_internal).to_string(),
            r.transport.as_str().to_string(),
            r.size.to_string(),
            r.direction.as_str().to_string(),
            r.device_id.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

// ---- featurization ----

pub type FeatureRow = [f32; FEATURES];

/// Per-packet raw features, in order: src internal, dst internal, service
/// port category, transport code, application protocol, inter-arrival time,
/// packet size, direction.
pub fn featurize(records: &[PacketRecord]) -> Result<Vec<FeatureRow>> {
    let mut rows = Vec::with_capacity(records.len());
    let mut prev: Option<f64> = None;
    for (i, r) in records.iter().enumerate() {
        let iat = match prev {
            None => 0.0,
            Some(p) if r.timestamp < p => {
                return Err(Error::Precondition(format!(
                    "records not sorted by timestamp at index {i} ({} < {p})",
                    r.timestamp
                )))
            }
            Some(p) => r.timestamp - p,
        };
        prev = Some(r.timestamp);
        let port = service_port(r);
        let mut row = [0f32; FEATURES];
        row[F_SRC_INTERNAL] = f32::from(u8::from(r.src_internal));
        row[F_DST_INTERNAL] = f32::from(u8::from(r.dst_internal));
        row[F_SERVICE_PORT] = f32::from(port_category::of(port));
        row[F_TRANSPORT] = f32::from(r.transport.code());
        row[F_APP_PROTO] = f32::from(app_protocol::of(port));
        row[F_INTER_ARRIVAL] = iat as f32;
        row[F_SIZE] = r.size as f32;
        row[F_DIRECTION] = f32::from(r.direction.code());
        rows.push(row);
    }
    Ok(rows)
}

/// One sample: an `[n × f]` feature sequence from a single device.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPoint {
    pub features: Tensor<f32>,
    pub label: Option<usize>,
    pub device_id: String,
}

/// Cuts rows into consecutive non-overlapping windows of `n`; a trailing
/// remainder shorter than `n` is dropped.
pub fn segment(rows: &[FeatureRow], n: usize, label: Option<usize>, device_id: &str) -> Vec<DataPoint> {
    assert!(n >= 1, "sequence length must be positive");
    rows.chunks_exact(n)
        .map(|chunk| DataPoint {
            features: Tensor::from_vec(&[n, FEATURES], chunk.iter().flatten().copied().collect())
                .expect("window shape"),
            label,
            device_id: device_id.to_string(),
        })
        .collect()
}

// ---- normalization ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: Vec<f32>,
    pub max: Vec<f32>,
    /// Features that pass through `ln(1 + x)` before min-max scaling.
    pub log1p: Vec<bool>,
}

impl Normalizer {
    fn default_transforms() -> Vec<bool> {
        (0..FEATURES)
            .map(|i| i == F_INTER_ARRIVAL || i == F_SIZE)
            .collect()
    }

    fn transform(&self, j: usize, v: f32) -> f32 {
        if self.log1p[j] {
            v.max(0.0).ln_1p()
        } else {
            v
        }
    }

    /// Fits per-feature ranges on (training) points.
    pub fn fit(points: &[DataPoint]) -> Result<Self> {
        let f = points
            .first()
            .ok_or_else(|| Error::Invalid("cannot fit normalizer on no data".into()))?
            .features
            .cols();
        let mut norm = Normalizer {
            min: vec![f32::INFINITY; f],
            max: vec![f32::NEG_INFINITY; f],
            log1p: if f == FEATURES {
                Self::default_transforms()
            } else {
                vec![false; f]
            },
        };
        for p in points {
            if p.features.cols() != f {
                return Err(Error::shape("normalizer", "inconsistent feature count"));
            }
            for i in 0..p.features.rows() {
                for (j, &v) in p.features.row(i).iter().enumerate() {
                    let t = norm.transform(j, v);
                    norm.min[j] = norm.min[j].min(t);
                    norm.max[j] = norm.max[j].max(t);
                }
            }
        }
        Ok(norm)
    }

    pub fn apply_value(&self, j: usize, v: f32) -> f32 {
        let t = self.transform(j, v);
        let range = self.max[j] - self.min[j];
        if range <= 0.0 {
            0.0
        } else {
            ((t - self.min[j]) / range).clamp(0.0, 1.0)
        }
    }

    pub fn apply_point(&self, p: &DataPoint) -> DataPoint {
        let mut out = p.clone();
        let f = out.features.cols();
        for (k, v) in out.features.data_mut().iter_mut().enumerate() {
            *v = self.apply_value(k % f, *v);
        }
        out
    }

    pub fn apply(&self, points: &[DataPoint]) -> Vec<DataPoint> {
        points.iter().map(|p| self.apply_point(p)).collect()
    }
}

// ---- datasets ----

/// Segmented raw (un-normalized) data for all devices in a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seq_len: usize,
    /// Device identifiers; the index is the global class index.
    pub devices: Vec<String>,
    /// Points carry their global class index as label.
    pub points: Vec<DataPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seq_len: usize,
    pub features: usize,
    pub devices: Vec<String>,
    pub labels: Vec<usize>,
    pub payload_sha256: String,
    /// Normalization constants, when a normalizer has been fitted for this data.
    pub normalizer: Option<Normalizer>,
}

impl Dataset {
    /// Groups records by device (class indices follow sorted device ids),
    /// orders each device's packets by timestamp, featurizes and segments.
    pub fn from_records(records: &[PacketRecord], seq_len: usize) -> Result<Self> {
        let mut by_device: BTreeMap<&str, Vec<PacketRecord>> = BTreeMap::new();
        for r in records {
            by_device.entry(r.device_id.as_str()).or_default().push(r.clone());
        }
        let mut devices = Vec::with_capacity(by_device.len());
        let mut points = Vec::new();
        for (class, (id, mut recs)) in by_device.into_iter().enumerate() {
            recs.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
            let rows = featurize(&recs)?;
            points.extend(segment(&rows, seq_len, Some(class), id));
            devices.push(id.to_string());
        }
        Ok(Dataset {
            seq_len,
            devices,
            points,
        })
    }

    pub fn num_devices(&self) -> usize {
        self.devices.len()
    }

    pub fn label_of(&self, i: usize) -> usize {
        self.points[i].label.expect("dataset points are labeled")
    }

    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        (0..self.points.len()).filter(|&i| self.label_of(i) == class).collect()
    }

    fn payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.points.len() * self.seq_len * FEATURES * 4);
        for p in &self.points {
            for v in p.features.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Writes `dataset.toml` (manifest) and `dataset.bin` (little-endian
    /// `f32` features) into `dir`.
    pub fn save(&self, dir: &Path, normalizer: Option<&Normalizer>) -> Result<DatasetManifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let payload = self.payload();
        let manifest = DatasetManifest {
            seq_len: self.seq_len,
            features: FEATURES,
            devices: self.devices.clone(),
            labels: (0..self.points.len()).map(|i| self.label_of(i)).collect(),
            payload_sha256: sha256_hex(&payload),
            normalizer: normalizer.cloned(),
        };
        let bin = dir.join("dataset.bin");
        std::fs::write(&bin, payload).map_err(|e| Error::io(&bin, e))?;
        let man = dir.join("dataset.toml");
        let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(&man, text).map_err(|e| Error::io(&man, e))?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<(Self, DatasetManifest)> {
        let man = dir.join("dataset.toml");
        let text = std::fs::read_to_string(&man).map_err(|e| Error::io(&man, e))?;
        let manifest: DatasetManifest =
            toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", man.display())))?;
        let bin = dir.join("dataset.bin");
        let payload = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if sha256_hex(&payload) != manifest.payload_sha256 {
            return Err(Error::Format("dataset payload checksum mismatch".into()));
        }
        let per_point = manifest.seq_len * manifest.features;
        if payload.len() != per_point * 4 * manifest.labels.len() {
            return Err(Error::Format("dataset payload size mismatch".into()));
        }
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let points = manifest
            .labels
            .iter()
            .zip(values.chunks_exact(per_point.max(1)))
            .map(|(&label, chunk)| DataPoint {
                features: Tensor::from_vec(&[manifest.seq_len, manifest.features], chunk.to_vec())
                    .expect("shape"),
                label: Some(label),
                device_id: manifest.devices[label].clone(),
            })
            .collect();
        Ok((
            Dataset {
                seq_len: manifest.seq_len,
                devices: manifest.devices.clone(),
                points,
            },
            manifest,
        ))
    }
}

// ---- partitions and splits ----

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DevicePartition {
    /// Sorted global class indices.
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    pub seed: u64,
}

impl DevicePartition {
    /// Index of a global class within the seen set.
    pub fn seen_index(&self, class: usize) -> Option<usize> {
        self.seen.binary_search(&class).ok()
    }

    pub fn unseen_index(&self, class: usize) -> Option<usize> {
        self.unseen.binary_search(&class).ok()
    }

    pub fn is_seen(&self, class: usize) -> bool {
        self.seen_index(class).is_some()
    }

    pub fn all(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.seen.iter().chain(&self.unseen).copied().collect();
        set.into_iter().collect()
    }
}

/// Randomly picks `num_unseen` of `num_devices` classes as unseen.
pub fn make_partition(num_devices: usize, num_unseen: usize, seed: u64) -> Result<DevicePartition> {
    if num_unseen == 0 || num_unseen >= num_devices {
        return Err(Error::Invalid(format!(
            "num_unseen must be in 1..{num_devices}, got {num_unseen}"
        )));
    }
    let mut classes: Vec<usize> = (0..num_devices).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    classes.shuffle(&mut rng);
    let mut unseen = classes[..num_unseen].to_vec();
    let mut seen = classes[num_unseen..].to_vec();
    unseen.sort_unstable();
    seen.sort_unstable();
    Ok(DevicePartition { seen, unseen, seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

/// Indices into the dataset, split per class.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles each class's points (seeded) and cuts them by `ratios`.
pub fn train_val_test_split(labels: &[usize], ratios: SplitRatios, seed: u64) -> Split {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let total = ratios.train + ratios.val + ratios.test;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split::default();
    for (_, mut idx) in by_class {
        idx.shuffle(&mut rng);
        let m = idx.len();
        let n_train = ((ratios.train / total) * m as f64).round() as usize;
        let n_val = (((ratios.val / total) * m as f64).round() as usize).min(m - n_train);
        split.train.extend_from_slice(&idx[..n_train]);
        split.val.extend_from_slice(&idx[n_train..n_train + n_val]);
        split.test.extend_from_slice(&idx[n_train + n_val..]);
    }
    split
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(ts: f64, sp: u16, dp: u16) -> PacketRecord {
        PacketRecord {
            timestamp: ts,
            src_port: sp,
            dst_port: dp,
            src_internal: true,
            dst_internal: false,
            transport: Transport::Tcp,
            size: 60,
            direction: Direction::Outbound,
            device_id: "cam".into(),
        }
    }

    const HEADER: &str = "timestamp,src_port,dst_port,src_internal,dst_internal,proto,size,direction,device_id\n";

    #[test]
    fn parses_rows_in_order() {
        let csv = format!(
            "{HEADER}1.0,51000,443,1,0,tcp,60,out,cam\n1.5,443,51000,0,1,tcp,1500,in,cam\n2.0,5353,5353,1,1,udp,90,out,hub\n"
        );
        let t = parse_packet_csv_reader(csv.as_bytes()).unwrap();
        assert!(t.skipped.is_empty());
        assert_eq!(t.records.len(), 3);
        assert_eq!(t.records[1].size, 1500);
        assert_eq!(t.records[2].device_id, "hub");
        assert_eq!(t.records[2].transport, Transport::Udp);
    }

    #[test]
    fn out_of_range_port_is_skipped() {
        let csv = format!(
            "{HEADER}1.0,51000,443,1,0,tcp,60,out,cam\n1.1,70000,443,1,0,tcp,60,out,cam\n1.2,51000,443,1,0,tcp,60,out,cam\n"
        );
        let t = parse_packet_csv_reader(csv.as_bytes()).unwrap();
        assert_eq!(t.records.len(), 2);
        assert_eq!(t.skipped.len(), 1);
        assert_eq!(t.skipped[0].line, 3);
        assert!(t.ensure_skip_rate(MAX_SKIP_FRACTION).is_err());
        assert!(t.ensure_skip_rate(0.5).is_ok());
    }

    #[test]
    fn header_only_is_empty() {
        let t = parse_packet_csv_reader(HEADER.as_bytes()).unwrap();
        assert!(t.records.is_empty() && t.skipped.is_empty());
    }

    #[test]
    fn wrong_header_is_fatal() {
        assert!(parse_packet_csv_reader("a,b,c\n1,2,3\n".as_bytes()).is_err());
    }

    #[test]
    fn missing_file_is_fatal() {
        assert!(matches!(
            parse_packet_csv(Path::new("/nonexistent/trace.csv")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn inter_arrival_and_first_packet() {
        let rows = featurize(&[rec(10.0, 51514, 443), rec(10.5, 51514, 443)]).unwrap();
        assert_eq!(rows[0][F_INTER_ARRIVAL], 0.0);
        assert_eq!(rows[1][F_INTER_ARRIVAL], 0.5);
        let single = featurize(&[rec(3.0, 1, 2)]).unwrap();
        assert_eq!(single[0][F_INTER_ARRIVAL], 0.0);
    }

    #[test]
    fn service_port_is_lower_port() {
        let rows = featurize(&[rec(0.0, 443, 51514)]).unwrap();
        assert_eq!(rows[0][F_SERVICE_PORT], f32::from(port_category::HTTPS));
        assert_eq!(rows[0][F_APP_PROTO], f32::from(app_protocol::HTTPS));
    }

    #[test]
    fn unsorted_records_are_rejected() {
        assert!(matches!(
            featurize(&[rec(2.0, 1, 2), rec(1.0, 1, 2)]),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn port_buckets() {
        assert_eq!(port_category::of(22), port_category::SYSTEM);
        assert_eq!(port_category::of(8883), port_category::REGISTERED);
        assert_eq!(port_category::of(50000), port_category::DYNAMIC);
        assert_eq!(port_category::of(68), port_category::DHCP);
    }

    #[test]
    fn segmentation_counts() {
        let rows = vec![[0f32; FEATURES]; 450];
        assert_eq!(segment(&rows, 200, Some(1), "d").len(), 2);
        assert_eq!(segment(&rows[..200], 200, Some(1), "d").len(), 1);
        assert_eq!(segment(&rows[..199], 200, Some(1), "d").len(), 0);
    }

    fn point(rows: Vec<FeatureRow>) -> DataPoint {
        let n = rows.len();
        DataPoint {
            features: Tensor::from_vec(&[n, FEATURES], rows.into_iter().flatten().collect()).unwrap(),
            label: Some(0),
            device_id: "d".into(),
        }
    }

    #[test]
    fn normalizer_cases() {
        let mut a = [7f32; FEATURES];
        a[F_SERVICE_PORT] = 0.0;
        let mut b = a;
        b[F_SERVICE_PORT] = 10.0;
        let norm = Normalizer::fit(&[point(vec![a, b])]).unwrap();
        // constant column maps to zero
        assert_eq!(norm.apply_value(F_TRANSPORT, 7.0), 0.0);
        // identity transform, min 0, max 10
        assert_eq!(norm.apply_value(F_SERVICE_PORT, 5.0), 0.5);
        // out of range is clamped
        assert_eq!(norm.apply_value(F_SERVICE_PORT, 20.0), 1.0);
    }

    #[test]
    fn partition_examples() {
        let p = make_partition(12, 2, 7).unwrap();
        assert_eq!((p.seen.len(), p.unseen.len()), (10, 2));
        assert_eq!(p, make_partition(12, 2, 7).unwrap());
        assert!(make_partition(12, 12, 7).is_err());
        assert!(make_partition(12, 0, 7).is_err());
        let distinct: BTreeSet<Vec<usize>> =
            (0..5).map(|s| make_partition(12, 2, s).unwrap().unseen).collect();
        assert!(distinct.len() > 1);
    }

    #[test]
    fn split_ratios_per_class() {
        let labels: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let s = train_val_test_split(&labels, SplitRatios::default(), 3);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (60, 20, 20));
        assert_eq!(s, train_val_test_split(&labels, SplitRatios::default(), 3));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }
}
