//! JSON documents for graphs and network configurations.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::HashSet;
use std::path::Path;

use super::FormatError;
use crate::error::Result;
use crate::graph::{GraphInput, LayerKind, NetworkGraph, Node, RoadNetConfig};

const DOC_FORMAT: &str = "roadnet-graph";
const DOC_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct GraphDoc {
    format: String,
    version: u32,
    inputs: Vec<GraphInput>,
    nodes: Vec<NodeDoc>,
    outputs: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct NodeDoc {
    name: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    attrs: Option<Value>,
    inputs: Vec<String>,
}

fn node_to_doc(n: &Node) -> NodeDoc {
    let mut v = serde_json::to_value(n.kind).expect("layer kinds serialize");
    let attrs = v.as_object_mut().and_then(|m| m.remove("attrs"));
    NodeDoc { name: n.name.clone(), kind: n.kind.name().to_string(), attrs, inputs: n.inputs.clone() }
}

fn node_from_doc(d: NodeDoc) -> Result<Node, FormatError> {
    if !LayerKind::NAMES.contains(&d.kind.as_str()) {
        return Err(FormatError::UnknownKind { node: d.name, kind: d.kind });
    }
    let mut tagged = serde_json::Map::new();
    tagged.insert("kind".into(), Value::String(d.kind));
    if let Some(attrs) = d.attrs {
        tagged.insert("attrs".into(), attrs);
    }
    let kind: LayerKind = serde_json::from_value(Value::Object(tagged))
        .map_err(|e| FormatError::Document(format!("node `{}`: {e}", d.name)))?;
    Ok(Node::new(d.name, kind, d.inputs))
}

pub fn graph_to_json(g: &NetworkGraph) -> String {
    let doc = GraphDoc {
        format: DOC_FORMAT.into(),
        version: DOC_VERSION,
        inputs: g.inputs().to_vec(),
        nodes: g.nodes().iter().map(node_to_doc).collect(),
        outputs: g.outputs().to_vec(),
    };
    serde_json::to_string_pretty(&doc).expect("graph documents serialize")
}

pub fn graph_from_json(text: &str) -> Result<NetworkGraph> {
    let doc: GraphDoc = serde_json::from_str(text).map_err(|e| FormatError::Document(e.to_string()))?;
    if doc.format != DOC_FORMAT {
        return Err(FormatError::Document(format!("unexpected format tag `{}`", doc.format)).into());
    }
    if doc.version != DOC_VERSION {
        return Err(FormatError::Document(format!("unsupported document version {}", doc.version)).into());
    }
    let defined: HashSet<&str> =
        doc.inputs.iter().map(|i| i.name.as_str()).chain(doc.nodes.iter().map(|n| n.name.as_str())).collect();
    for n in &doc.nodes {
        if let Some(missing) = n.inputs.iter().find(|i| !defined.contains(i.as_str())) {
            return Err(FormatError::DanglingInput { node: n.name.clone(), input: missing.clone() }.into());
        }
    }
    for o in &doc.outputs {
        if !defined.contains(o.as_str()) {
            return Err(FormatError::DanglingInput { node: "<outputs>".into(), input: o.clone() }.into());
        }
    }
    let nodes = doc.nodes.into_iter().map(node_from_doc).collect::<Result<Vec<_>, _>>()?;
    NetworkGraph::new(doc.inputs, nodes, doc.outputs)
}

pub fn save_graph(path: impl AsRef<Path>, g: &NetworkGraph) -> Result<()> {
    std::fs::write(path, graph_to_json(g))?;
    Ok(())
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<NetworkGraph> {
    graph_from_json(&std::fs::read_to_string(path)?)
}

pub fn config_to_json(cfg: &RoadNetConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("configs serialize")
}

pub fn config_from_json(text: &str) -> Result<RoadNetConfig> {
    let cfg: RoadNetConfig = serde_json::from_str(text).map_err(|e| FormatError::Document(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::graph::build_roadnet_rt;

    #[test]
    fn empty_graph_round_trips() {
        let g = NetworkGraph::empty();
        let text = graph_to_json(&g);
        assert!(text.contains("\"nodes\": []"));
        assert_eq!(graph_from_json(&text).unwrap(), g);
    }

    #[test]
    fn reference_graph_round_trips() {
        let g = build_roadnet_rt(&RoadNetConfig::default()).unwrap();
        let back = graph_from_json(&graph_to_json(&g)).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn unknown_kind_names_the_node() {
        let text = r#"{"format":"roadnet-graph","version":1,
            "inputs":[{"name":"in","dims":{"height":4,"width":4,"channels":1}}],
            "nodes":[{"name":"c3","kind":"Conv3D","inputs":["in"]}],"outputs":["c3"]}"#;
        match graph_from_json(text) {
            Err(Error::Format(FormatError::UnknownKind { node, kind })) => {
                assert_eq!(node, "c3");
                assert_eq!(kind, "Conv3D");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dangling_input_is_reported() {
        let text = r#"{"format":"roadnet-graph","version":1,"inputs":[],
            "nodes":[{"name":"r","kind":"ReLU","inputs":["ghost"]}],"outputs":[]}"#;
        assert!(matches!(
            graph_from_json(text),
            Err(Error::Format(FormatError::DanglingInput { node, input })) if node == "r" && input == "ghost"
        ));
    }

    #[test]
    fn resize_scale_is_numeric() {
        let g = build_roadnet_rt(&RoadNetConfig::default()).unwrap();
        let text = graph_to_json(&g);
        assert!(text.contains("\"scale\": 0.5"));
        assert!(text.contains("\"scale\": 8.0"));
        let bad = text.replace("\"scale\": 8.0", "\"scale\": 3.0");
        assert!(matches!(graph_from_json(&bad), Err(Error::Format(FormatError::Document(_)))));
    }

    #[test]
    fn config_round_trip_and_defaults() {
        let cfg = RoadNetConfig::default();
        assert_eq!(config_from_json(&config_to_json(&cfg)).unwrap(), cfg);
        let partial = config_from_json(r#"{"input_height": 560}"#).unwrap();
        assert_eq!(partial.input_height, 560);
        assert_eq!(partial.input_width, 960);
    }
}
