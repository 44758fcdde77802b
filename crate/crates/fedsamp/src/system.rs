//! Heterogeneous client fleet: per-client resource profiles, the system
//! model shared by all other modules, and synthetic fleet generation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Tolerance on the data-weight normalization check.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// One client's measured resource profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    /// Stable client identifier, 1-based.
    pub id: usize,
    /// Seconds for one full local update (all local iterations folded in).
    pub compute_time: f64,
    /// Upload seconds when allocated exactly one bandwidth unit.
    pub comm_time_unit_bw: f64,
    /// Number of local samples.
    pub data_size: u64,
}

impl ClientProfile {
    pub fn new(id: usize, compute_time: f64, comm_time_unit_bw: f64, data_size: u64) -> Self {
        Self {
            id,
            compute_time,
            comm_time_unit_bw,
            data_size,
        }
    }
}

/// The client fleet plus the shared total bandwidth.
///
/// Clients are kept sorted ascending by compute time (ties broken by id) —
/// the closed-form expected-straggler formula requires that order. Data
/// weights are the normalized per-client data shares, parallel to `clients`.
///
/// Immutable after construction; safe to share across threads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemModel {
    pub clients: Vec<ClientProfile>,
    pub total_bandwidth: f64,
    pub data_weights: Vec<f64>,
}

impl SystemModel {
    /// Builds a model from raw profiles: sorts by `(compute_time, id)`,
    /// normalizes data weights, and validates the result.
    pub fn new(mut clients: Vec<ClientProfile>, total_bandwidth: f64) -> Result<Self> {
        clients.sort_by(|a, b| {
            a.compute_time
                .partial_cmp(&b.compute_time)
                .expect("non-finite compute time")
                .then(a.id.cmp(&b.id))
        });
        let total: u64 = clients.iter().map(|c| c.data_size).sum();
        if total == 0 {
            return Err(Error::InvalidModel("fleet has no data".into()));
        }
        let data_weights = clients
            .iter()
            .map(|c| c.data_size as f64 / total as f64)
            .collect();
        let model = Self {
            clients,
            total_bandwidth,
            data_weights,
        };
        let report = validate_system(&model);
        if report.is_ok() {
            Ok(model)
        } else {
            Err(Error::InvalidModel(report.to_string()))
        }
    }

    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    /// Position of the client with the given id in the sorted order.
    pub fn index_of(&self, id: usize) -> Option<usize> {
        self.clients.iter().position(|c| c.id == id)
    }

    /// Same fleet with a different total bandwidth.
    pub fn with_total_bandwidth(&self, total_bandwidth: f64) -> Result<Self> {
        if !(total_bandwidth > 0.0) || !total_bandwidth.is_finite() {
            return Err(Error::InvalidModel(format!(
                "total_bandwidth must be positive, got {total_bandwidth}"
            )));
        }
        let mut m = self.clone();
        m.total_bandwidth = total_bandwidth;
        Ok(m)
    }
}

/// Per-client independent participation probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingVector {
    pub probs: Vec<f64>,
}

impl SamplingVector {
    /// Validates `0 < q_n <= 1` for every entry.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidModel("empty sampling vector".into()));
        }
        for (i, &q) in probs.iter().enumerate() {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::InvalidModel(format!(
                    "sampling probability q[{i}] = {q} outside (0, 1]"
                )));
            }
        }
        Ok(Self { probs })
    }

    /// All clients participate every round.
    pub fn full(n: usize) -> Self {
        Self {
            probs: vec![1.0; n],
        }
    }

    /// Every client participates with probability `1/n`.
    pub fn uniform(n: usize) -> Self {
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Outcome of a structural check: empty means the model is valid.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_ok() {
            write!(f, "ok")
        } else {
            write!(f, "{}", self.violations.join("; "))
        }
    }
}

/// Checks every structural invariant of a model and reports all violations.
pub fn validate_system(model: &SystemModel) -> ValidationReport {
    let mut v = Vec::new();
    if model.clients.is_empty() {
        v.push("fleet is empty".to_string());
    }
    for c in &model.clients {
        if !(c.compute_time > 0.0) || !c.compute_time.is_finite() {
            v.push(format!("client {}: compute_time {} not positive", c.id, c.compute_time));
        }
        if !(c.comm_time_unit_bw > 0.0) || !c.comm_time_unit_bw.is_finite() {
            v.push(format!(
                "client {}: comm_time_unit_bw {} not positive",
                c.id, c.comm_time_unit_bw
            ));
        }
        if c.data_size == 0 {
            v.push(format!("client {}: data_size must be >= 1", c.id));
        }
    }
    for w in model.clients.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if a.compute_time > b.compute_time {
            v.push("clients not sorted by compute_time".to_string());
            break;
        }
        if a.compute_time == b.compute_time && a.id >= b.id {
            v.push("compute_time ties not broken by ascending id".to_string());
            break;
        }
    }
    let mut ids: Vec<usize> = model.clients.iter().map(|c| c.id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        v.push("duplicate client ids".to_string());
    }
    if model.data_weights.len() != model.clients.len() {
        v.push(format!(
            "data_weights length {} != client count {}",
            model.data_weights.len(),
            model.clients.len()
        ));
    } else {
        let sum: f64 = model.data_weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            v.push(format!("data weights sum to {sum} != 1"));
        }
        if model.data_weights.iter().any(|&w| !(w > 0.0)) {
            v.push("data weights must be positive".to_string());
        }
    }
    if !(model.total_bandwidth > 0.0) || !model.total_bandwidth.is_finite() {
        v.push(format!(
            "total_bandwidth {} not positive",
            model.total_bandwidth
        ));
    }
    ValidationReport { violations: v }
}

/// One device class for synthetic fleet generation: nominal compute time,
/// unit-bandwidth communication time, and mean local data size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub compute_time: f64,
    pub comm_time_unit_bw: f64,
    pub mean_data: f64,
}

impl ClassSpec {
    pub fn new(compute_time: f64, comm_time_unit_bw: f64, mean_data: f64) -> Self {
        Self {
            compute_time,
            comm_time_unit_bw,
            mean_data,
        }
    }
}

/// Generates a deterministic fleet of `class_specs.len() * per_class` clients.
///
/// Each client's profile is drawn uniformly within `±jitter` (relative) of
/// its class spec. Draws are keyed on the class spec values and the slot
/// index rather than the class position, so permuting `class_specs` changes
/// only client ids, never the generated multiset of profiles.
pub fn generate_fleet(
    class_specs: &[ClassSpec],
    per_class: usize,
    jitter: f64,
    seed: u64,
    total_bandwidth: f64,
) -> Result<SystemModel> {
    if class_specs.is_empty() || per_class == 0 {
        return Err(Error::InvalidConfig(
            "need at least one class and one client per class".into(),
        ));
    }
    if !(0.0..1.0).contains(&jitter) {
        return Err(Error::InvalidConfig(format!(
            "jitter {jitter} outside [0, 1); values >= 1 would produce non-positive profiles"
        )));
    }
    let mut clients = Vec::with_capacity(class_specs.len() * per_class);
    for (ci, spec) in class_specs.iter().enumerate() {
        for slot in 0..per_class {
            let mut rng = stream_rng(
                seed,
                Stream::Fleet,
                &[
                    spec.compute_time.to_bits(),
                    spec.comm_time_unit_bw.to_bits(),
                    spec.mean_data.to_bits(),
                    slot as u64,
                ],
            );
            let mut draw = |base: f64| -> f64 {
                if jitter == 0.0 {
                    base
                } else {
                    base * rng.random_range(1.0 - jitter..=1.0 + jitter)
                }
            };
            let tau = draw(spec.compute_time);
            let t = draw(spec.comm_time_unit_bw);
            let data = draw(spec.mean_data).round().max(1.0) as u64;
            let id = ci * per_class + slot + 1;
            clients.push(ClientProfile::new(id, tau, t, data));
        }
    }
    SystemModel::new(clients, total_bandwidth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_model() -> SystemModel {
        SystemModel::new(
            vec![
                ClientProfile::new(1, 1.0, 4.0, 20),
                ClientProfile::new(2, 2.0, 5.0, 30),
                ClientProfile::new(3, 3.0, 6.0, 50),
            ],
            10.0,
        )
        .unwrap()
    }

    #[test]
    fn valid_model_passes() {
        let m = toy_model();
        assert!(validate_system(&m).is_ok());
        assert_eq!(m.data_weights, vec![0.2, 0.3, 0.5]);
    }

    #[test]
    fn unsorted_clients_flagged() {
        let m = SystemModel {
            clients: vec![
                ClientProfile::new(1, 2.0, 1.0, 10),
                ClientProfile::new(2, 1.0, 1.0, 10),
            ],
            total_bandwidth: 10.0,
            data_weights: vec![0.5, 0.5],
        };
        let report = validate_system(&m);
        assert!(report
            .violations
            .iter()
            .any(|v| v.contains("not sorted by compute_time")));
    }

    #[test]
    fn bad_weight_sum_flagged() {
        let m = SystemModel {
            clients: vec![
                ClientProfile::new(1, 1.0, 1.0, 10),
                ClientProfile::new(2, 2.0, 1.0, 10),
            ],
            total_bandwidth: 10.0,
            data_weights: vec![0.5, 0.6],
        };
        let report = validate_system(&m);
        assert!(report.violations.iter().any(|v| v.contains("sum to 1.1")));
    }

    #[test]
    fn nonpositive_fields_flagged() {
        let m = SystemModel {
            clients: vec![ClientProfile::new(1, -1.0, 0.0, 0)],
            total_bandwidth: 0.0,
            data_weights: vec![1.0],
        };
        let report = validate_system(&m);
        assert_eq!(report.violations.len(), 4);
    }

    #[test]
    fn sampling_vector_bounds() {
        assert!(SamplingVector::new(vec![0.5, 1.0]).is_ok());
        assert!(SamplingVector::new(vec![0.0, 1.0]).is_err());
        assert!(SamplingVector::new(vec![0.5, 1.1]).is_err());
    }

    #[test]
    fn fleet_five_classes_of_twenty() {
        let specs = vec![
            ClassSpec::new(0.5, 4.0, 100.0),
            ClassSpec::new(1.0, 8.0, 100.0),
            ClassSpec::new(2.0, 12.0, 100.0),
            ClassSpec::new(3.5, 20.0, 100.0),
            ClassSpec::new(5.0, 40.0, 100.0),
        ];
        let m = generate_fleet(&specs, 20, 0.0, 1, 100.0).unwrap();
        assert_eq!(m.len(), 100);
        assert!(validate_system(&m).is_ok());
        // with zero jitter every class's 20 clients are identical
        for spec in &specs {
            let count = m
                .clients
                .iter()
                .filter(|c| {
                    c.compute_time == spec.compute_time
                        && c.comm_time_unit_bw == spec.comm_time_unit_bw
                        && c.data_size == spec.mean_data as u64
                })
                .count();
            assert_eq!(count, 20);
        }
    }

    #[test]
    fn singleton_fleet_normalizes() {
        let m = generate_fleet(&[ClassSpec::new(2.0, 5.0, 100.0)], 1, 0.0, 3, 10.0).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.data_weights[0], 1.0);
    }

    #[test]
    fn same_seed_same_fleet() {
        let specs = vec![ClassSpec::new(1.0, 2.0, 50.0), ClassSpec::new(2.0, 3.0, 80.0)];
        let a = generate_fleet(&specs, 5, 0.3, 42, 20.0).unwrap();
        let b = generate_fleet(&specs, 5, 0.3, 42, 20.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn permuting_classes_preserves_profile_multiset() {
        let specs = vec![
            ClassSpec::new(1.0, 2.0, 50.0),
            ClassSpec::new(2.0, 3.0, 80.0),
            ClassSpec::new(0.7, 9.0, 30.0),
        ];
        let mut permuted = specs.clone();
        permuted.rotate_left(1);
        let a = generate_fleet(&specs, 4, 0.2, 9, 20.0).unwrap();
        let b = generate_fleet(&permuted, 4, 0.2, 9, 20.0).unwrap();
        let strip = |m: &SystemModel| {
            m.clients
                .iter()
                .map(|c| (c.compute_time.to_bits(), c.comm_time_unit_bw.to_bits(), c.data_size))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a), strip(&b));
        assert!(validate_system(&a).is_ok());
        assert!(validate_system(&b).is_ok());
    }

    #[test]
    fn jitter_at_least_one_rejected() {
        let specs = vec![ClassSpec::new(1.0, 2.0, 50.0)];
        assert!(generate_fleet(&specs, 2, 1.0, 0, 10.0).is_err());
        assert!(generate_fleet(&specs, 2, 1.5, 0, 10.0).is_err());
    }

    #[test]
    fn generated_fleets_always_validate() {
        let specs = vec![
            ClassSpec::new(0.3, 1.0, 40.0),
            ClassSpec::new(1.3, 7.0, 90.0),
        ];
        for seed in 0..20 {
            let m = generate_fleet(&specs, 7, 0.5, seed, 15.0).unwrap();
            assert!(validate_system(&m).is_ok(), "seed {seed}");
        }
    }
}
