//! Grid case parsing and the canonical on-disk case formats.
//!
//! Two input dialects are accepted: a strict MATPOWER subset (`.case`,
//! MATLAB-style matrices `bus`/`branch`/`gen`/`gencost` plus scalar
//! `baseMVA`, quadratic costs only) and a lossless JSON mirror. The parsed
//! [`CaseData`] stores everything in per-unit on `base_mva`, with bus ids
//! remapped to dense 0-based indices and the original ids retained. See
//! `docs/FORMATS.md` for the grammar of both formats.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CaseError {
    /// Unparseable token or missing section.
    #[error("MalformedFile: {0}")]
    MalformedFile(String),
    /// A `CaseData` invariant is violated; the message names the invariant.
    #[error("ValidationError: {0}")]
    ValidationError(String),
    /// The in-service network is not a single connected island.
    #[error("IslandError: network splits into {islands} islands")]
    IslandError { islands: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusType {
    Slack,
    Pv,
    Pq,
}

/// One bus. Demands and shunts are per-unit on the system base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    /// Original id from the case file.
    pub id: u32,
    pub bus_type: BusType,
    pub pd: f64,
    pub qd: f64,
    pub gs: f64,
    pub bs: f64,
    pub vmin: f64,
    pub vmax: f64,
}

/// One in-service branch. `from`/`to` are dense internal bus indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    /// Total line-charging susceptance (half at each end).
    pub b_charge: f64,
    /// Off-nominal tap ratio on the from side; 1.0 for none.
    pub tap: f64,
    /// Active-flow magnitude limit, per-unit.
    pub flow_limit: f64,
}

/// Quadratic cost curve `a2*P^2 + a1*P + a0` with `P` in MW.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostCurve {
    pub a2: f64,
    pub a1: f64,
    pub a0: f64,
}

impl CostCurve {
    /// Cost of a per-unit output on the given MVA base.
    pub fn eval_pu(&self, pg_pu: f64, base_mva: f64) -> f64 {
        let p = pg_pu * base_mva;
        self.a2 * p * p + self.a1 * p + self.a0
    }
}

/// One generator. `bus` is a dense internal bus index; limits are per-unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gen {
    pub bus: usize,
    pub pmin: f64,
    pub pmax: f64,
    pub qmin: f64,
    pub qmax: f64,
    pub cost: CostCurve,
}

/// Static grid description, per-unit, validated and single-island.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseData {
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub gens: Vec<Gen>,
}

impl CaseData {
    pub fn n_bus(&self) -> usize {
        self.buses.len()
    }
    pub fn n_branch(&self) -> usize {
        self.branches.len()
    }
    pub fn n_gen(&self) -> usize {
        self.gens.len()
    }

    pub fn slack_index(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.bus_type == BusType::Slack)
            .expect("validated case has a slack bus")
    }

    /// Dense index of an original bus id.
    pub fn bus_index(&self, original_id: u32) -> Option<usize> {
        self.buses.iter().position(|b| b.id == original_id)
    }

    /// Base active demand per bus, per-unit.
    pub fn pd_vector(&self) -> Vec<f64> {
        self.buses.iter().map(|b| b.pd).collect()
    }

    /// Base reactive demand per bus, per-unit.
    pub fn qd_vector(&self) -> Vec<f64> {
        self.buses.iter().map(|b| b.qd).collect()
    }

    /// Generator indices attached to a bus.
    pub fn gens_at(&self, bus: usize) -> Vec<usize> {
        self.gens
            .iter()
            .enumerate()
            .filter(|(_, g)| g.bus == bus)
            .map(|(i, _)| i)
            .collect()
    }

    /// SHA-256 of the canonical JSON serialization; identifies the case in
    /// dataset and report metadata.
    pub fn content_hash(&self) -> String {
        let json = serialize_case(self);
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        hex_string(&h.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

/// Parse case-file contents in either accepted dialect.
pub fn parse_case(text: &str) -> Result<CaseData, CaseError> {
    let trimmed = text.trim_start();
    let case = if trimmed.starts_with('{') {
        parse_json(text)?
    } else {
        parse_matpower(text)?
    };
    validate(&case)?;
    Ok(case)
}

/// Canonical serialization: the JSON mirror, per-unit, original bus ids.
/// `parse_case(serialize_case(c)) == c` field-exact for every valid case.
pub fn serialize_case(case: &CaseData) -> String {
    let file = JsonCase::from_case(case);
    serde_json::to_string_pretty(&file).expect("case serialization cannot fail") + "\n"
}

// ---------------------------------------------------------------------------
// JSON mirror

#[derive(Serialize, Deserialize)]
struct JsonBus {
    id: u32,
    bus_type: BusType,
    pd: f64,
    qd: f64,
    gs: f64,
    bs: f64,
    vmin: f64,
    vmax: f64,
}

#[derive(Serialize, Deserialize)]
struct JsonBranch {
    from: u32,
    to: u32,
    r: f64,
    x: f64,
    b_charge: f64,
    tap: f64,
    flow_limit: f64,
    #[serde(default = "default_true")]
    status: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Serialize, Deserialize)]
struct JsonGen {
    bus: u32,
    pmin: f64,
    pmax: f64,
    qmin: f64,
    qmax: f64,
    cost: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct JsonCase {
    format: String,
    version: u32,
    name: String,
    base_mva: f64,
    buses: Vec<JsonBus>,
    branches: Vec<JsonBranch>,
    gens: Vec<JsonGen>,
}

impl JsonCase {
    fn from_case(c: &CaseData) -> Self {
        JsonCase {
            format: "opflearn-case".to_string(),
            version: 1,
            name: c.name.clone(),
            base_mva: c.base_mva,
            buses: c
                .buses
                .iter()
                .map(|b| JsonBus {
                    id: b.id,
                    bus_type: b.bus_type,
                    pd: b.pd,
                    qd: b.qd,
                    gs: b.gs,
                    bs: b.bs,
                    vmin: b.vmin,
                    vmax: b.vmax,
                })
                .collect(),
            branches: c
                .branches
                .iter()
                .map(|br| JsonBranch {
                    from: c.buses[br.from].id,
                    to: c.buses[br.to].id,
                    r: br.r,
                    x: br.x,
                    b_charge: br.b_charge,
                    tap: br.tap,
                    flow_limit: br.flow_limit,
                    status: true,
                })
                .collect(),
            gens: c
                .gens
                .iter()
                .map(|g| JsonGen {
                    bus: c.buses[g.bus].id,
                    pmin: g.pmin,
                    pmax: g.pmax,
                    qmin: g.qmin,
                    qmax: g.qmax,
                    cost: [g.cost.a2, g.cost.a1, g.cost.a0],
                })
                .collect(),
        }
    }
}

fn parse_json(text: &str) -> Result<CaseData, CaseError> {
    let file: JsonCase =
        serde_json::from_str(text).map_err(|e| CaseError::MalformedFile(e.to_string()))?;
    if file.format != "opflearn-case" {
        return Err(CaseError::MalformedFile(format!(
            "unknown format tag `{}`",
            file.format
        )));
    }
    if file.version != 1 {
        return Err(CaseError::MalformedFile(format!(
            "unsupported format version {}",
            file.version
        )));
    }
    let buses: Vec<Bus> = file
        .buses
        .iter()
        .map(|b| Bus {
            id: b.id,
            bus_type: b.bus_type,
            pd: b.pd,
            qd: b.qd,
            gs: b.gs,
            bs: b.bs,
            vmin: b.vmin,
            vmax: b.vmax,
        })
        .collect();
    let index_of = |id: u32| -> Result<usize, CaseError> {
        buses
            .iter()
            .position(|b| b.id == id)
            .ok_or_else(|| CaseError::ValidationError(format!("branch/gen references unknown bus id {}", id)))
    };
    let mut branches = Vec::new();
    for br in &file.branches {
        if !br.status {
            // Out-of-service branches participate in nothing downstream.
            continue;
        }
        branches.push(Branch {
            from: index_of(br.from)?,
            to: index_of(br.to)?,
            r: br.r,
            x: br.x,
            b_charge: br.b_charge,
            tap: br.tap,
            flow_limit: br.flow_limit,
        });
    }
    let mut gens = Vec::new();
    for g in &file.gens {
        gens.push(Gen {
            bus: index_of(g.bus)?,
            pmin: g.pmin,
            pmax: g.pmax,
            qmin: g.qmin,
            qmax: g.qmax,
            cost: CostCurve {
                a2: g.cost[0],
                a1: g.cost[1],
                a0: g.cost[2],
            },
        });
    }
    Ok(CaseData {
        name: file.name,
        base_mva: file.base_mva,
        buses,
        branches,
        gens,
    })
}

// ---------------------------------------------------------------------------
// MATPOWER subset

fn strip_comments(text: &str) -> String {
    text.lines()
        .map(|l| match l.find('%') {
            Some(i) => &l[..i],
            None => l,
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn find_function_name(text: &str) -> Option<String> {
    for line in text.lines() {
        let l = line.trim();
        if let Some(rest) = l.strip_prefix("function") {
            // `function mpc = case9`
            if let Some(eq) = rest.find('=') {
                return Some(rest[eq + 1..].trim().trim_end_matches(';').to_string());
            }
        }
    }
    None
}

fn extract_scalar(text: &str, key: &str) -> Result<f64, CaseError> {
    // Look for `<key> = <value>;` allowing an `mpc.` prefix and flexible spacing.
    for line in text.lines() {
        let l = line.trim();
        let l = l.strip_prefix("mpc.").unwrap_or(l);
        if let Some(rest) = l.strip_prefix(key) {
            let rest = rest.trim_start();
            if let Some(rhs) = rest.strip_prefix('=') {
                let tok = rhs.trim().trim_end_matches(';').trim();
                return tok.parse::<f64>().map_err(|_| {
                    CaseError::MalformedFile(format!("unparseable value `{}` for `{}`", tok, key))
                });
            }
        }
    }
    Err(CaseError::MalformedFile(format!("missing scalar `{}`", key)))
}

fn extract_matrix(text: &str, key: &str) -> Result<Vec<Vec<f64>>, CaseError> {
    // Find `<key> = [ ... ];` allowing an `mpc.` prefix.
    let mut search = 0usize;
    let bytes = text.as_bytes();
    while let Some(pos) = text[search..].find(key) {
        let at = search + pos;
        // must be a token boundary followed by `=` then `[`
        let before_ok = at == 0 || !bytes[at - 1].is_ascii_alphanumeric() && bytes[at - 1] != b'_';
        let after = &text[at + key.len()..];
        let after_trim = after.trim_start();
        if before_ok && after_trim.starts_with('=') {
            let rhs = after_trim[1..].trim_start();
            if let Some(stripped) = rhs.strip_prefix('[') {
                let end = stripped.find(']').ok_or_else(|| {
                    CaseError::MalformedFile(format!("unterminated matrix `{}`", key))
                })?;
                let body = &stripped[..end];
                let mut rows = Vec::new();
                for raw_row in body.split(&[';', '\n'][..]) {
                    let raw_row = raw_row.trim();
                    if raw_row.is_empty() {
                        continue;
                    }
                    let mut row = Vec::new();
                    for tok in raw_row.split_whitespace() {
                        let v: f64 = tok.trim_end_matches(',').parse().map_err(|_| {
                            CaseError::MalformedFile(format!(
                                "unparseable token `{}` in matrix `{}`",
                                tok, key
                            ))
                        })?;
                        row.push(v);
                    }
                    rows.push(row);
                }
                return Ok(rows);
            }
        }
        search = at + key.len();
    }
    Err(CaseError::MalformedFile(format!("missing section `{}`", key)))
}

fn parse_matpower(text: &str) -> Result<CaseData, CaseError> {
    let clean = strip_comments(text);
    let name = find_function_name(&clean).unwrap_or_else(|| "case".to_string());
    let base_mva = extract_scalar(&clean, "baseMVA")?;
    if !(base_mva.is_finite() && base_mva > 0.0) {
        return Err(CaseError::ValidationError(format!(
            "baseMVA must be positive, got {}",
            base_mva
        )));
    }
    let bus_rows = extract_matrix(&clean, "bus")?;
    let gen_rows = extract_matrix(&clean, "gen")?;
    let branch_rows = extract_matrix(&clean, "branch")?;
    let gencost_rows = extract_matrix(&clean, "gencost")?;

    let mut buses = Vec::new();
    for row in &bus_rows {
        if row.len() < 13 {
            return Err(CaseError::MalformedFile(format!(
                "bus row has {} columns, expected >= 13",
                row.len()
            )));
        }
        let bus_type = match row[1] as i64 {
            1 => BusType::Pq,
            2 => BusType::Pv,
            3 => BusType::Slack,
            other => {
                return Err(CaseError::ValidationError(format!(
                    "unsupported bus type {} at bus {}",
                    other, row[0]
                )))
            }
        };
        buses.push(Bus {
            id: row[0] as u32,
            bus_type,
            pd: row[2] / base_mva,
            qd: row[3] / base_mva,
            gs: row[4] / base_mva,
            bs: row[5] / base_mva,
            vmax: row[11],
            vmin: row[12],
        });
    }
    let index_of = |id: f64| -> Result<usize, CaseError> {
        let id = id as u32;
        buses
            .iter()
            .position(|b| b.id == id)
            .ok_or_else(|| CaseError::ValidationError(format!("reference to unknown bus id {}", id)))
    };

    let mut branches = Vec::new();
    for row in &branch_rows {
        if row.len() < 11 {
            return Err(CaseError::MalformedFile(format!(
                "branch row has {} columns, expected >= 11",
                row.len()
            )));
        }
        if row[9] != 0.0 {
            return Err(CaseError::ValidationError(format!(
                "phase-shifting transformer unsupported (branch {}-{} angle {})",
                row[0], row[1], row[9]
            )));
        }
        if row[10] == 0.0 {
            continue; // out of service
        }
        branches.push(Branch {
            from: index_of(row[0])?,
            to: index_of(row[1])?,
            r: row[2],
            x: row[3],
            b_charge: row[4],
            tap: if row[8] == 0.0 { 1.0 } else { row[8] },
            flow_limit: row[5] / base_mva,
        });
    }

    if gen_rows.len() != gencost_rows.len() {
        return Err(CaseError::MalformedFile(format!(
            "{} gen rows but {} gencost rows",
            gen_rows.len(),
            gencost_rows.len()
        )));
    }
    let mut gens = Vec::new();
    for (row, cost) in gen_rows.iter().zip(&gencost_rows) {
        if row.len() < 10 {
            return Err(CaseError::MalformedFile(format!(
                "gen row has {} columns, expected >= 10",
                row.len()
            )));
        }
        if row[7] == 0.0 {
            return Err(CaseError::ValidationError(format!(
                "out-of-service generator at bus {} unsupported",
                row[0]
            )));
        }
        if cost.len() < 7 {
            return Err(CaseError::MalformedFile(format!(
                "gencost row has {} columns, expected 7",
                cost.len()
            )));
        }
        if cost[0] != 2.0 || cost[3] != 3.0 {
            return Err(CaseError::ValidationError(format!(
                "only quadratic costs supported (model=2, ncost=3), got model={} ncost={}",
                cost[0], cost[3]
            )));
        }
        gens.push(Gen {
            bus: index_of(row[0])?,
            pmin: row[9] / base_mva,
            pmax: row[8] / base_mva,
            qmin: row[4] / base_mva,
            qmax: row[3] / base_mva,
            cost: CostCurve {
                a2: cost[4],
                a1: cost[5],
                a0: cost[6],
            },
        });
    }

    Ok(CaseData {
        name,
        base_mva,
        buses,
        branches,
        gens,
    })
}

// ---------------------------------------------------------------------------
// Validation

fn validate(case: &CaseData) -> Result<(), CaseError> {
    let fail = |msg: String| Err(CaseError::ValidationError(msg));

    if case.buses.is_empty() {
        return fail("case has no buses".into());
    }
    if !(case.base_mva.is_finite() && case.base_mva > 0.0) {
        return fail(format!("baseMVA must be positive, got {}", case.base_mva));
    }
    for b in &case.buses {
        for (v, what) in [(b.pd, "pd"), (b.qd, "qd"), (b.gs, "gs"), (b.bs, "bs")] {
            if !v.is_finite() {
                return fail(format!("non-finite {} at bus {}", what, b.id));
            }
        }
        if !(b.vmin < b.vmax) {
            return fail(format!("vmin < vmax violated at bus {} ({} >= {})", b.id, b.vmin, b.vmax));
        }
        if b.vmin <= 0.0 {
            return fail(format!("vmin must be positive at bus {}", b.id));
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    for b in &case.buses {
        if !seen.insert(b.id) {
            return fail(format!("duplicate bus id {}", b.id));
        }
    }
    let n_slack = case
        .buses
        .iter()
        .filter(|b| b.bus_type == BusType::Slack)
        .count();
    if n_slack != 1 {
        return fail(format!("exactly one slack bus required, found {}", n_slack));
    }

    for br in &case.branches {
        if br.from >= case.n_bus() || br.to >= case.n_bus() {
            return fail("branch endpoint references an unknown bus".into());
        }
        if br.from == br.to {
            return fail(format!("self-loop branch at bus {}", case.buses[br.from].id));
        }
        if !(br.r >= 0.0) {
            return fail(format!(
                "r >= 0 violated on branch {}-{}",
                case.buses[br.from].id, case.buses[br.to].id
            ));
        }
        if br.x == 0.0 || !br.x.is_finite() {
            return fail(format!(
                "x != 0 violated on branch {}-{}",
                case.buses[br.from].id, case.buses[br.to].id
            ));
        }
        if !(br.tap > 0.0) {
            return fail(format!(
                "tap > 0 violated on branch {}-{}",
                case.buses[br.from].id, case.buses[br.to].id
            ));
        }
        if !(br.flow_limit > 0.0) {
            return fail(format!(
                "flow_limit > 0 violated on branch {}-{}",
                case.buses[br.from].id, case.buses[br.to].id
            ));
        }
        if !br.b_charge.is_finite() {
            return fail("non-finite branch charging".into());
        }
    }

    if case.gens.is_empty() {
        return fail("case has no generators".into());
    }
    for g in &case.gens {
        if g.bus >= case.n_bus() {
            return fail("generator references an unknown bus".into());
        }
        let bus = &case.buses[g.bus];
        if bus.bus_type == BusType::Pq {
            return fail(format!("generator at PQ bus {}", bus.id));
        }
        if !(g.pmin <= g.pmax) {
            return fail(format!("pmin <= pmax violated for generator at bus {}", bus.id));
        }
        if !(g.qmin <= g.qmax) {
            return fail(format!("qmin <= qmax violated for generator at bus {}", bus.id));
        }
        for (v, what) in [
            (g.pmin, "pmin"),
            (g.pmax, "pmax"),
            (g.qmin, "qmin"),
            (g.qmax, "qmax"),
            (g.cost.a2, "a2"),
            (g.cost.a1, "a1"),
            (g.cost.a0, "a0"),
        ] {
            if !v.is_finite() {
                return fail(format!("non-finite {} for generator at bus {}", what, bus.id));
            }
        }
    }
    for b in &case.buses {
        let has_gen = case.gens.iter().any(|g| g.bus == case.bus_index(b.id).unwrap());
        match b.bus_type {
            BusType::Slack | BusType::Pv if !has_gen => {
                return fail(format!("{:?} bus {} has no generator", b.bus_type, b.id));
            }
            _ => {}
        }
    }

    // Single-island check over in-service branches.
    let n = case.n_bus();
    let mut adj = vec![Vec::new(); n];
    for br in &case.branches {
        adj[br.from].push(br.to);
        adj[br.to].push(br.from);
    }
    let mut visited = vec![false; n];
    let mut stack = vec![0usize];
    visited[0] = true;
    let mut reached = 1usize;
    while let Some(u) = stack.pop() {
        for &v in &adj[u] {
            if !visited[v] {
                visited[v] = true;
                reached += 1;
                stack.push(v);
            }
        }
    }
    if reached != n {
        // count islands for the error message
        let mut islands = 1usize;
        for s in 0..n {
            if !visited[s] {
                islands += 1;
                let mut stack = vec![s];
                visited[s] = true;
                while let Some(u) = stack.pop() {
                    for &v in &adj[u] {
                        if !visited[v] {
                            visited[v] = true;
                            stack.push(v);
                        }
                    }
                }
            }
        }
        return Err(CaseError::IslandError { islands });
    }

    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_BUS: &str = r#"
function mpc = case2
% minimal two-bus case
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
    1  3  0   0  0  0  1  1.0  0  230  1  1.1  0.9;
    2  1  50  10 0  0  1  1.0  0  230  1  1.1  0.9;
];
mpc.gen = [
    1  0  0  150  -150  1.0  100  1  150  0;
];
mpc.branch = [
    1  2  0  0.1  0  100  0  0  0  0  1;
];
mpc.gencost = [
    2  0  0  3  0.01  40  0;
];
"#;

    #[test]
    fn two_bus_parses_to_per_unit() {
        let c = parse_case(TWO_BUS).unwrap();
        assert_eq!(c.name, "case2");
        assert_eq!(c.base_mva, 100.0);
        assert_eq!(c.n_bus(), 2);
        assert_eq!(c.branches[0].x, 0.1);
        assert_eq!(c.buses[1].pd, 0.5);
        assert_eq!(c.buses[1].qd, 0.1);
        assert_eq!(c.gens[0].pmax, 1.5);
        assert_eq!(c.gens[0].cost, CostCurve { a2: 0.01, a1: 40.0, a0: 0.0 });
        assert_eq!(c.slack_index(), 0);
    }

    #[test]
    fn per_unit_conversion_inverts_to_mw() {
        let c = parse_case(TWO_BUS).unwrap();
        for b in &c.buses {
            let back = b.pd * c.base_mva;
            let mw = if b.id == 2 { 50.0 } else { 0.0 };
            assert!((back - mw).abs() <= 1e-12 * mw.max(1.0));
        }
    }

    #[test]
    fn deleted_branch_is_island_error() {
        let broken = TWO_BUS.replace("1  2  0  0.1  0  100  0  0  0  0  1;", "");
        match parse_case(&broken) {
            Err(CaseError::IslandError { islands }) => assert_eq!(islands, 2),
            other => panic!("expected IslandError, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn out_of_service_branch_is_dropped_after_connectivity() {
        // Parallel branch out of service: still connected, branch dropped.
        let extra = TWO_BUS.replace(
            "1  2  0  0.1  0  100  0  0  0  0  1;",
            "1  2  0  0.1  0  100  0  0  0  0  1;\n    1  2  0  0.2  0  100  0  0  0  0  0;",
        );
        let c = parse_case(&extra).unwrap();
        assert_eq!(c.n_branch(), 1);
        assert_eq!(c.branches[0].x, 0.1);
        // If the only branch is off, the network splits and parsing must fail.
        let only_off = TWO_BUS.replace(
            "1  2  0  0.1  0  100  0  0  0  0  1;",
            "1  2  0  0.1  0  100  0  0  0  0  0;",
        );
        assert!(matches!(parse_case(&only_off), Err(CaseError::IslandError { .. })));
    }

    #[test]
    fn gencost_roundtrips_bit_exactly() {
        let c = parse_case(TWO_BUS).unwrap();
        let json = serialize_case(&c);
        let c2 = parse_case(&json).unwrap();
        assert_eq!(c, c2);
        assert_eq!(c2.gens[0].cost, CostCurve { a2: 0.01, a1: 40.0, a0: 0.0 });
    }

    #[test]
    fn missing_section_is_malformed() {
        let broken = TWO_BUS.replace("mpc.gencost", "mpc.nocost");
        assert!(matches!(parse_case(&broken), Err(CaseError::MalformedFile(_))));
    }

    #[test]
    fn unparseable_token_is_malformed() {
        let broken = TWO_BUS.replace("mpc.baseMVA = 100;", "mpc.baseMVA = hundred;");
        assert!(matches!(parse_case(&broken), Err(CaseError::MalformedFile(_))));
    }

    #[test]
    fn piecewise_cost_rejected() {
        let broken = TWO_BUS.replace("2  0  0  3  0.01  40  0;", "1  0  0  3  0.01  40  0;");
        assert!(matches!(parse_case(&broken), Err(CaseError::ValidationError(_))));
    }

    /// Every CaseData invariant has a fixture that triggers its ValidationError.
    #[test]
    fn rejection_is_total() {
        let mutations: Vec<(&str, &str, &str)> = vec![
            // (invariant, find, replace)
            (
                "exactly one slack",
                "2  1  50  10 0  0  1  1.0  0  230  1  1.1  0.9;",
                "2  3  50  10 0  0  1  1.0  0  230  1  1.1  0.9;",
            ),
            (
                "branch endpoint exists",
                "1  2  0  0.1  0  100  0  0  0  0  1;",
                "1  7  0  0.1  0  100  0  0  0  0  1;",
            ),
            (
                "pmin <= pmax",
                "1  0  0  150  -150  1.0  100  1  150  0;",
                "1  0  0  150  -150  1.0  100  1  150  200;",
            ),
            (
                "qmin <= qmax",
                "1  0  0  150  -150  1.0  100  1  150  0;",
                "1  0  0  -150  150  1.0  100  1  150  0;",
            ),
            (
                "vmin < vmax",
                "1  3  0   0  0  0  1  1.0  0  230  1  1.1  0.9;",
                "1  3  0   0  0  0  1  1.0  0  230  1  0.9  1.1;",
            ),
            (
                "flow_limit > 0",
                "1  2  0  0.1  0  100  0  0  0  0  1;",
                "1  2  0  0.1  0  0  0  0  0  0  1;",
            ),
            (
                "r >= 0",
                "1  2  0  0.1  0  100  0  0  0  0  1;",
                "1  2  -0.01  0.1  0  100  0  0  0  0  1;",
            ),
            (
                "x != 0",
                "1  2  0  0.1  0  100  0  0  0  0  1;",
                "1  2  0  0  0  100  0  0  0  0  1;",
            ),
            (
                "tap > 0",
                "1  2  0  0.1  0  100  0  0  0  0  1;",
                "1  2  0  0.1  0  100  0  0  -0.9  0  1;",
            ),
        ];
        for (what, find, replace) in mutations {
            assert!(TWO_BUS.contains(find), "fixture lost anchor for {}", what);
            let broken = TWO_BUS.replace(find, replace);
            match parse_case(&broken) {
                Err(CaseError::ValidationError(msg)) => {
                    assert!(!msg.is_empty(), "{} produced empty message", what)
                }
                other => panic!("{}: expected ValidationError, got {:?}", what, other.map(|_| ())),
            }
        }
    }

    #[test]
    fn json_mirror_accepts_status_filter() {
        let c = parse_case(TWO_BUS).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&serialize_case(&c)).unwrap();
        // add a parallel off branch; parser must drop it
        let br = v["branches"][0].clone();
        let mut off = br.clone();
        off["status"] = serde_json::Value::Bool(false);
        off["x"] = serde_json::json!(0.33);
        v["branches"].as_array_mut().unwrap().push(off);
        let c2 = parse_case(&v.to_string()).unwrap();
        assert_eq!(c2.n_branch(), 1);
        assert_eq!(c2.branches[0].x, 0.1);
    }
}
