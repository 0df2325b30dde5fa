use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GraphMode {
    Retrieval,
    Verification,
}

/// Text node, its images, text-image edges and the complete graph over the
/// images. Retrieval mode adds a self-loop on the text node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiModalGraph {
    pub text_node: String,
    pub image_nodes: Vec<String>,
    pub cross_edges: Vec<(String, String)>,
    pub intra_image_edges: Vec<(String, String)>,
    pub text_self_loop: bool,
}

pub fn build_graph(unit_text: &str, image_ids: &[String], mode: GraphMode) -> MultiModalGraph {
    let cross_edges = image_ids
        .iter()
        .map(|i| (unit_text.to_string(), i.clone()))
        .collect();
    let mut intra_image_edges = Vec::new();
    for (a, x) in image_ids.iter().enumerate() {
        for y in &image_ids[a + 1..] {
            intra_image_edges.push((x.clone(), y.clone()));
        }
    }
    MultiModalGraph {
        text_node: unit_text.to_string(),
        image_nodes: image_ids.to_vec(),
        cross_edges,
        intra_image_edges,
        text_self_loop: mode == GraphMode::Retrieval,
    }
}
