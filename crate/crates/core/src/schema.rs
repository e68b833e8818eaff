//! JSON schemas of the documents the tool reads and writes.

/// `(name, schema text)`; `name.schema.json` is the file under `schemas/`.
pub const SCHEMAS: [(&str, &str); 6] = [
    ("workload_spec", include_str!("../schemas/workload_spec.schema.json")),
    ("server_config", include_str!("../schemas/server_config.schema.json")),
    ("simulation_result", include_str!("../schemas/simulation_result.schema.json")),
    ("placement_result", include_str!("../schemas/placement_result.schema.json")),
    ("forest_model", include_str!("../schemas/forest_model.schema.json")),
    ("placement_model", include_str!("../schemas/placement_model.schema.json")),
];

pub fn schema(name: &str) -> Option<&'static str> {
    SCHEMAS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}
