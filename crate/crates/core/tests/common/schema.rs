//! Minimal JSON Schema checker covering the keywords the shipped schemas use.

use serde_json::Value;

fn load(file: &str) -> Value {
    let (name, _) = file.split_once(".schema.json").expect("schema file name");
    let text = loraplace::schema::schema(name).unwrap_or_else(|| panic!("no schema {name}"));
    serde_json::from_str(text).expect("schema is JSON")
}

/// Validates `v` against the named schema, returning every violation.
pub fn validate(name: &str, v: &Value) -> Result<(), Vec<String>> {
    let root = load(&format!("{name}.schema.json"));
    let mut errs = Vec::new();
    check(&root, &root, v, "$", &mut errs);
    if errs.is_empty() {
        Ok(())
    } else {
        Err(errs)
    }
}

fn resolve(root: &Value, r: &str) -> (Value, Value) {
    let (file, pointer) = r.split_once('#').unwrap_or((r, ""));
    let doc = if file.is_empty() { root.clone() } else { load(file) };
    let target = doc.pointer(pointer).unwrap_or_else(|| panic!("bad $ref {r}")).clone();
    (doc, target)
}

fn type_ok(t: &str, v: &Value) -> bool {
    match t {
        "object" => v.is_object(),
        "array" => v.is_array(),
        "string" => v.is_string(),
        "boolean" => v.is_boolean(),
        "null" => v.is_null(),
        "number" => v.is_number(),
        "integer" => v.is_i64() || v.is_u64() || v.as_f64().is_some_and(|f| f.fract() == 0.0),
        other => panic!("unsupported type {other}"),
    }
}

fn check(root: &Value, s: &Value, v: &Value, path: &str, errs: &mut Vec<String>) {
    let obj = s.as_object().expect("schema object");
    for (k, kw) in obj {
        match k.as_str() {
            "$schema" | "$id" | "$defs" | "title" | "description" => {}
            "$ref" => {
                let (doc, target) = resolve(root, kw.as_str().unwrap());
                check(&doc, &target, v, path, errs);
            }
            "type" => {
                let ok = match kw {
                    Value::String(t) => type_ok(t, v),
                    Value::Array(ts) => ts.iter().any(|t| type_ok(t.as_str().unwrap(), v)),
                    _ => panic!("bad type keyword"),
                };
                if !ok {
                    errs.push(format!("{path}: expected type {kw}, got {v}"));
                }
            }
            "enum" => {
                if !kw.as_array().unwrap().contains(v) {
                    errs.push(format!("{path}: {v} not in {kw}"));
                }
            }
            "const" => {
                if kw != v {
                    errs.push(format!("{path}: expected {kw}"));
                }
            }
            "minimum" | "exclusiveMinimum" => {
                if let (Some(x), Some(m)) = (v.as_f64(), kw.as_f64()) {
                    let bad = if k == "minimum" { x < m } else { x <= m };
                    if bad {
                        errs.push(format!("{path}: {x} violates {k} {m}"));
                    }
                }
            }
            "minItems" | "maxItems" => {
                if let Some(a) = v.as_array() {
                    let m = kw.as_u64().unwrap() as usize;
                    let bad = if k == "minItems" { a.len() < m } else { a.len() > m };
                    if bad {
                        errs.push(format!("{path}: {} items violates {k} {m}", a.len()));
                    }
                }
            }
            "items" => {
                if let Some(a) = v.as_array() {
                    for (i, x) in a.iter().enumerate() {
                        check(root, kw, x, &format!("{path}[{i}]"), errs);
                    }
                }
            }
            "required" => {
                if let Some(o) = v.as_object() {
                    for r in kw.as_array().unwrap() {
                        if !o.contains_key(r.as_str().unwrap()) {
                            errs.push(format!("{path}: missing {r}"));
                        }
                    }
                }
            }
            "properties" => {
                if let Some(o) = v.as_object() {
                    for (name, sub) in kw.as_object().unwrap() {
                        if let Some(x) = o.get(name) {
                            check(root, sub, x, &format!("{path}.{name}"), errs);
                        }
                    }
                }
            }
            "additionalProperties" => {
                if let Some(o) = v.as_object() {
                    let props = obj.get("properties").and_then(Value::as_object);
                    for (name, x) in o {
                        if props.is_some_and(|p| p.contains_key(name)) {
                            continue;
                        }
                        match kw {
                            Value::Bool(false) => errs.push(format!("{path}: unexpected property {name}")),
                            Value::Bool(true) => {}
                            sub => check(root, sub, x, &format!("{path}.{name}"), errs),
                        }
                    }
                }
            }
            "propertyNames" => {
                assert_eq!(kw["pattern"], "^[0-9]+$", "only digit-key patterns supported");
                if let Some(o) = v.as_object() {
                    for name in o.keys() {
                        if name.is_empty() || !name.bytes().all(|b| b.is_ascii_digit()) {
                            errs.push(format!("{path}: key {name} is not an integer"));
                        }
                    }
                }
            }
            "oneOf" => {
                let passing = kw
                    .as_array()
                    .unwrap()
                    .iter()
                    .filter(|sub| {
                        let mut e = Vec::new();
                        check(root, sub, v, path, &mut e);
                        e.is_empty()
                    })
                    .count();
                if passing != 1 {
                    errs.push(format!("{path}: matches {passing} oneOf branches"));
                }
            }
            other => panic!("unsupported schema keyword {other}"),
        }
    }
}
