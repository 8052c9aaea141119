//! Hierarchical concept graph: entities, attributes and the typed relations
//! between them.
//!
//! Relations are stored per `(entity, attribute)` pair. Pairs without a
//! declared relation read as [`RelationKind::Irrelevance`], so the relation
//! function is total over valid pairs.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("malformed graph document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("relation ({entity}, {attribute}) references missing {missing}")]
    MissingReference {
        entity: String,
        attribute: String,
        missing: String,
    },
    #[error("conflicting relations declared for ({entity}, {attribute})")]
    DuplicateRelation { entity: String, attribute: String },
    #[error("attribute {attribute} uses undeclared category {category:?}")]
    UnknownCategory { attribute: String, category: String },
    #[error("duplicate {kind} id {id:?}")]
    DuplicateId { kind: &'static str, id: String },
    #[error("{kind} {id:?} has an empty name")]
    EmptyName { kind: &'static str, id: String },
    #[error("unknown entity {0:?}")]
    UnknownEntity(String),
    #[error("unknown attribute {0:?}")]
    UnknownAttribute(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationKind {
    Association,
    Irrelevance,
    Exclusion,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub id: String,
    pub name: String,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub entity: String,
    pub attribute: String,
    pub kind: RelationKind,
}

/// On-disk graph document. Field names are part of the file format.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GraphDocument {
    #[serde(default)]
    pub entities: Vec<Entity>,
    #[serde(default)]
    pub attributes: Vec<Attribute>,
    #[serde(default)]
    pub relations: Vec<Relation>,
    #[serde(default)]
    pub categories: Vec<String>,
}

/// Counts and non-fatal findings produced while validating a document.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub entities: usize,
    pub attributes: usize,
    pub relations: usize,
    pub categories: usize,
    pub warnings: Vec<String>,
}

/// A validated, immutable concept graph.
///
/// Entities and attributes are kept sorted by id; their position in that order
/// is the dense index used by feature maps and label heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptGraph {
    categories: Vec<String>,
    entities: Vec<Entity>,
    attributes: Vec<Attribute>,
    relations: BTreeMap<(usize, usize), RelationKind>,
    entity_index: HashMap<String, usize>,
    attribute_index: HashMap<String, usize>,
}

impl ConceptGraph {
    /// Parses and validates a JSON graph document.
    pub fn load_and_validate(source: &str) -> Result<(Self, ValidationReport), GraphError> {
        let doc: GraphDocument = serde_json::from_str(source)?;
        Self::from_document(doc)
    }

    pub fn from_document(doc: GraphDocument) -> Result<(Self, ValidationReport), GraphError> {
        let mut warnings = Vec::new();

        let mut categories = Vec::new();
        let mut seen_categories = BTreeSet::new();
        for category in doc.categories {
            if seen_categories.insert(category.clone()) {
                categories.push(category);
            } else {
                warnings.push(format!("category {category:?} declared twice"));
            }
        }

        let mut entities = doc.entities;
        entities.sort_by(|a, b| a.id.cmp(&b.id));
        for pair in entities.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(GraphError::DuplicateId {
                    kind: "entity",
                    id: pair[0].id.clone(),
                });
            }
        }
        for entity in &entities {
            if entity.name.trim().is_empty() {
                return Err(GraphError::EmptyName {
                    kind: "entity",
                    id: entity.id.clone(),
                });
            }
        }

        let mut attributes = doc.attributes;
        attributes.sort_by(|a, b| a.id.cmp(&b.id));
        for pair in attributes.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(GraphError::DuplicateId {
                    kind: "attribute",
                    id: pair[0].id.clone(),
                });
            }
        }
        for attribute in &attributes {
            if attribute.name.trim().is_empty() {
                return Err(GraphError::EmptyName {
                    kind: "attribute",
                    id: attribute.id.clone(),
                });
            }
            if !seen_categories.contains(&attribute.category) {
                return Err(GraphError::UnknownCategory {
                    attribute: attribute.id.clone(),
                    category: attribute.category.clone(),
                });
            }
        }

        let entity_index: HashMap<String, usize> = entities
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.clone(), i))
            .collect();
        let attribute_index: HashMap<String, usize> = attributes
            .iter()
            .enumerate()
            .map(|(i, a)| (a.id.clone(), i))
            .collect();

        let mut relations = BTreeMap::new();
        for relation in doc.relations {
            let e = entity_index.get(&relation.entity).copied();
            let a = attribute_index.get(&relation.attribute).copied();
            let (Some(e), Some(a)) = (e, a) else {
                let missing = if e.is_none() {
                    format!("entity {:?}", relation.entity)
                } else {
                    format!("attribute {:?}", relation.attribute)
                };
                return Err(GraphError::MissingReference {
                    entity: relation.entity,
                    attribute: relation.attribute,
                    missing,
                });
            };
            match relations.insert((e, a), relation.kind) {
                Some(previous) if previous != relation.kind => {
                    return Err(GraphError::DuplicateRelation {
                        entity: relation.entity,
                        attribute: relation.attribute,
                    });
                }
                Some(_) => warnings.push(format!(
                    "relation ({}, {}) declared twice",
                    relation.entity, relation.attribute
                )),
                None => {}
            }
        }

        let graph = Self {
            categories,
            entities,
            attributes,
            relations,
            entity_index,
            attribute_index,
        };
        warnings.extend(graph.asymmetric_exclusions());
        for (name, ids) in graph.shared_names() {
            warnings.push(format!("attributes {ids:?} share the name {name:?}"));
        }
        let report = ValidationReport {
            entities: graph.entities.len(),
            attributes: graph.attributes.len(),
            relations: graph.relations.len(),
            categories: graph.categories.len(),
            warnings,
        };
        for warning in &report.warnings {
            log::warn!("{warning}");
        }
        Ok((graph, report))
    }

    /// Canonical document for this graph (sorted ids, relations in
    /// `(entity, attribute)` order).
    pub fn to_document(&self) -> GraphDocument {
        GraphDocument {
            entities: self.entities.clone(),
            attributes: self.attributes.clone(),
            relations: self
                .relations
                .iter()
                .map(|(&(e, a), &kind)| Relation {
                    entity: self.entities[e].id.clone(),
                    attribute: self.attributes[a].id.clone(),
                    kind,
                })
                .collect(),
            categories: self.categories.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("graph document serializes")
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn entity_index(&self, id: &str) -> Option<usize> {
        self.entity_index.get(id).copied()
    }

    pub fn attribute_index(&self, id: &str) -> Option<usize> {
        self.attribute_index.get(id).copied()
    }

    pub fn attribute(&self, id: &str) -> Option<&Attribute> {
        self.attribute_index(id).map(|i| &self.attributes[i])
    }

    fn require_entity(&self, id: &str) -> Result<usize, GraphError> {
        self.entity_index(id)
            .ok_or_else(|| GraphError::UnknownEntity(id.to_string()))
    }

    fn require_attribute(&self, id: &str) -> Result<usize, GraphError> {
        self.attribute_index(id)
            .ok_or_else(|| GraphError::UnknownAttribute(id.to_string()))
    }

    /// Relation between an entity and an attribute; undeclared pairs are
    /// irrelevant.
    pub fn relation_of(&self, entity: &str, attribute: &str) -> Result<RelationKind, GraphError> {
        let e = self.require_entity(entity)?;
        let a = self.require_attribute(attribute)?;
        Ok(self.relation_by_index(e, a))
    }

    pub fn relation_by_index(&self, entity: usize, attribute: usize) -> RelationKind {
        self.relations
            .get(&(entity, attribute))
            .copied()
            .unwrap_or(RelationKind::Irrelevance)
    }

    /// Attributes that can stand in for `attribute` in a trace about
    /// `context_entity`: same category, different relation to the entity.
    /// Ordered by attribute id.
    pub fn substitution_set(
        &self,
        attribute: &str,
        context_entity: &str,
    ) -> Result<Vec<&str>, GraphError> {
        let a = self.require_attribute(attribute)?;
        let e = self.require_entity(context_entity)?;
        let kind = self.relation_by_index(e, a);
        let category = &self.attributes[a].category;
        Ok(self
            .attributes
            .iter()
            .enumerate()
            .filter(|&(i, attr)| {
                i != a && &attr.category == category && self.relation_by_index(e, i) != kind
            })
            .map(|(_, attr)| attr.id.as_str())
            .collect())
    }

    /// Attribute indices associated with an entity, in id order.
    pub fn associated_attributes(&self, entity: usize) -> Vec<usize> {
        self.attributes_with(entity, RelationKind::Association)
    }

    pub fn attributes_with(&self, entity: usize, kind: RelationKind) -> Vec<usize> {
        (0..self.attributes.len())
            .filter(|&a| self.relation_by_index(entity, a) == kind)
            .collect()
    }

    /// Two attributes are mutually exclusive when they share a category and
    /// some entity is associated with one while excluding the other.
    pub fn mutually_exclusive(&self, a: usize, b: usize) -> bool {
        if a == b || self.attributes[a].category != self.attributes[b].category {
            return false;
        }
        (0..self.entities.len()).any(|e| {
            let ra = self.relation_by_index(e, a);
            let rb = self.relation_by_index(e, b);
            matches!(
                (ra, rb),
                (RelationKind::Association, RelationKind::Exclusion)
                    | (RelationKind::Exclusion, RelationKind::Association)
            )
        })
    }

    /// Exclusion edges whose mirror is missing: entity `e1` excludes an
    /// attribute associated with `e2`, yet `e2` excludes nothing associated
    /// with `e1`.
    fn asymmetric_exclusions(&self) -> Vec<String> {
        let mut warnings = Vec::new();
        for (&(e1, a), &kind) in &self.relations {
            if kind != RelationKind::Exclusion {
                continue;
            }
            for e2 in 0..self.entities.len() {
                if e2 == e1 || self.relation_by_index(e2, a) != RelationKind::Association {
                    continue;
                }
                let mirrored = self.relations.iter().any(|(&(e, b), &k)| {
                    e == e2
                        && k == RelationKind::Exclusion
                        && self.relation_by_index(e1, b) == RelationKind::Association
                });
                if !mirrored {
                    warnings.push(format!(
                        "asymmetric exclusion: {} excludes {} (associated with {}) but {} excludes nothing associated with {}",
                        self.entities[e1].id,
                        self.attributes[a].id,
                        self.entities[e2].id,
                        self.entities[e2].id,
                        self.entities[e1].id,
                    ));
                }
            }
        }
        warnings
    }

    fn shared_names(&self) -> Vec<(String, Vec<String>)> {
        let mut by_name: BTreeMap<&str, Vec<String>> = BTreeMap::new();
        for attr in &self.attributes {
            by_name
                .entry(attr.name.as_str())
                .or_default()
                .push(attr.id.clone());
        }
        by_name
            .into_iter()
            .filter(|(_, ids)| ids.len() > 1)
            .map(|(name, ids)| (name.to_string(), ids))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(relations: &[(&str, &str, RelationKind)]) -> GraphDocument {
        GraphDocument {
            entities: vec![
                Entity {
                    id: "atelectasis".into(),
                    name: "Atelectasis".into(),
                },
                Entity {
                    id: "pneumonia".into(),
                    name: "Pneumonia".into(),
                },
            ],
            attributes: vec![
                Attribute {
                    id: "lung_opacity".into(),
                    name: "lung opacity".into(),
                    category: "density".into(),
                },
                Attribute {
                    id: "opacity".into(),
                    name: "opacity".into(),
                    category: "density".into(),
                },
                Attribute {
                    id: "lucency".into(),
                    name: "lucency".into(),
                    category: "density".into(),
                },
                Attribute {
                    id: "basilar".into(),
                    name: "basilar".into(),
                    category: "anatomical".into(),
                },
            ],
            relations: relations
                .iter()
                .map(|&(e, a, kind)| Relation {
                    entity: e.into(),
                    attribute: a.into(),
                    kind,
                })
                .collect(),
            categories: vec!["density".into(), "anatomical".into()],
        }
    }

    fn fig5_graph() -> ConceptGraph {
        use RelationKind::*;
        ConceptGraph::from_document(doc(&[
            ("pneumonia", "opacity", Association),
            ("pneumonia", "lucency", Exclusion),
            ("atelectasis", "lung_opacity", Association),
            ("atelectasis", "lucency", Exclusion),
            ("atelectasis", "basilar", Association),
        ]))
        .unwrap()
        .0
    }

    #[test]
    fn declared_relation_and_irrelevance_default() {
        let g = fig5_graph();
        assert_eq!(
            g.relation_of("pneumonia", "opacity").unwrap(),
            RelationKind::Association
        );
        assert_eq!(
            g.relation_of("pneumonia", "basilar").unwrap(),
            RelationKind::Irrelevance
        );
        assert!(matches!(
            g.relation_of("edema", "opacity"),
            Err(GraphError::UnknownEntity(_))
        ));
        assert!(matches!(
            g.relation_of("pneumonia", "round"),
            Err(GraphError::UnknownAttribute(_))
        ));
    }

    #[test]
    fn substitution_set_follows_category_and_relation() {
        let g = fig5_graph();
        // lung opacity is associated with atelectasis; opacity is irrelevant and
        // lucency excluded, both in the density category.
        assert_eq!(
            g.substitution_set("lung_opacity", "atelectasis").unwrap(),
            vec!["lucency", "opacity"]
        );
        // basilar is the only anatomical attribute.
        assert!(g
            .substitution_set("basilar", "atelectasis")
            .unwrap()
            .is_empty());
    }

    #[test]
    fn empty_document_is_valid() {
        let (g, report) = ConceptGraph::load_and_validate(
            r#"{"entities":[],"attributes":[],"relations":[],"categories":[]}"#,
        )
        .unwrap();
        assert_eq!((report.entities, report.attributes), (0, 0));
        assert_eq!(g.relation_count(), 0);
    }

    #[test]
    fn validation_errors() {
        use RelationKind::*;
        let missing = ConceptGraph::from_document(doc(&[("pneumonia", "nodule", Association)]));
        assert!(matches!(missing, Err(GraphError::MissingReference { .. })));

        let conflict = ConceptGraph::from_document(doc(&[
            ("pneumonia", "opacity", Association),
            ("pneumonia", "opacity", Exclusion),
        ]));
        assert!(matches!(
            conflict,
            Err(GraphError::DuplicateRelation { .. })
        ));

        let mut bad_category = doc(&[]);
        bad_category.attributes[0].category = "texture".into();
        assert!(matches!(
            ConceptGraph::from_document(bad_category),
            Err(GraphError::UnknownCategory { .. })
        ));

        let mut dup = doc(&[]);
        dup.entities.push(Entity {
            id: "pneumonia".into(),
            name: "again".into(),
        });
        assert!(matches!(
            ConceptGraph::from_document(dup),
            Err(GraphError::DuplicateId { .. })
        ));

        assert!(matches!(
            ConceptGraph::load_and_validate("{\"entities\": [}"),
            Err(GraphError::Parse(_))
        ));
    }

    #[test]
    fn repeated_identical_relation_is_a_warning() {
        use RelationKind::*;
        let (g, report) = ConceptGraph::from_document(doc(&[
            ("pneumonia", "opacity", Association),
            ("pneumonia", "opacity", Association),
        ]))
        .unwrap();
        assert_eq!(g.relation_count(), 1);
        assert!(report.warnings.iter().any(|w| w.contains("declared twice")));
    }

    #[test]
    fn asymmetric_exclusion_is_flagged() {
        use RelationKind::*;
        let (_, report) = ConceptGraph::from_document(doc(&[
            ("pneumonia", "opacity", Association),
            ("atelectasis", "lung_opacity", Association),
            ("atelectasis", "opacity", Exclusion),
        ]))
        .unwrap();
        assert!(report
            .warnings
            .iter()
            .any(|w| w.starts_with("asymmetric exclusion")));

        let (_, report) = ConceptGraph::from_document(doc(&[
            ("pneumonia", "opacity", Association),
            ("atelectasis", "lung_opacity", Association),
            ("atelectasis", "opacity", Exclusion),
            ("pneumonia", "lung_opacity", Exclusion),
        ]))
        .unwrap();
        assert!(!report
            .warnings
            .iter()
            .any(|w| w.starts_with("asymmetric exclusion")));
    }

    #[test]
    fn mutual_exclusion_needs_shared_category() {
        let g = fig5_graph();
        let lo = g.attribute_index("lung_opacity").unwrap();
        let lu = g.attribute_index("lucency").unwrap();
        let ba = g.attribute_index("basilar").unwrap();
        assert!(g.mutually_exclusive(lo, lu));
        assert!(g.mutually_exclusive(lu, lo));
        assert!(!g.mutually_exclusive(ba, lu));
        assert!(!g.mutually_exclusive(lo, lo));
    }

    #[test]
    fn serialize_round_trip() {
        let g = fig5_graph();
        let (again, _) = ConceptGraph::load_and_validate(&g.to_json()).unwrap();
        assert_eq!(g, again);
    }
}
