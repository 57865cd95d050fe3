use std::fmt;

use serde::{Deserialize, Serialize};

use crate::binmodel::NormInsn;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignatureKind {
    Add,
    Delete,
    ChangeOneBlock,
    ChangeManyBlock,
}

impl SignatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SignatureKind::Add => "add",
            SignatureKind::Delete => "delete",
            SignatureKind::ChangeOneBlock => "change_one_block",
            SignatureKind::ChangeManyBlock => "change_many_block",
        }
    }
}

impl fmt::Display for SignatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One block's instructions plus the instructions of CFG-adjacent blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParentsChildren {
    pub parent: Vec<NormInsn>,
    pub children: Vec<Vec<NormInsn>>,
}

impl ParentsChildren {
    pub fn instruction_count(&self) -> usize {
        self.parent.len() + self.children.iter().map(Vec::len).sum::<usize>()
    }
}

/// Instructions grouped by block, without edges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockList {
    pub blocks: Vec<Vec<NormInsn>>,
}

impl BlockList {
    pub fn instruction_count(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Structure {
    ParentsChildren(ParentsChildren),
    BlockList(BlockList),
}

impl Structure {
    pub fn instruction_count(&self) -> usize {
        match self {
            Structure::ParentsChildren(pc) => pc.instruction_count(),
            Structure::BlockList(bl) => bl.instruction_count(),
        }
    }

    /// Instruction lists in display order: parent first, then children.
    pub fn block_slices(&self) -> Vec<&[NormInsn]> {
        match self {
            Structure::ParentsChildren(pc) => std::iter::once(pc.parent.as_slice())
                .chain(pc.children.iter().map(Vec::as_slice))
                .collect(),
            Structure::BlockList(bl) => bl.blocks.iter().map(Vec::as_slice).collect(),
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Structure::ParentsChildren(_) => "parents_children",
            Structure::BlockList(_) => "block_list",
        }
    }
}

/// A vulnerability signature for one (CVE, function) and one patch kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    pub cve_id: String,
    pub function_name: String,
    pub kind: SignatureKind,
    /// Position among signatures sharing (cve, function, kind) in a database.
    #[serde(default)]
    pub ordinal: u32,
    pub structures: Vec<Structure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_signature: Option<BlockList>,
    pub total_instructions: usize,
}

impl Signature {
    pub fn new(
        cve_id: impl Into<String>,
        function_name: impl Into<String>,
        kind: SignatureKind,
        structures: Vec<Structure>,
        patch_signature: Option<BlockList>,
    ) -> Self {
        let total_instructions = structures.iter().map(Structure::instruction_count).sum();
        Signature {
            cve_id: cve_id.into(),
            function_name: function_name.into(),
            kind,
            ordinal: 0,
            structures,
            patch_signature,
            total_instructions,
        }
    }

    /// Check the structural invariants; the message names the broken rule.
    pub fn validate(&self) -> Result<(), String> {
        if self.structures.is_empty() {
            return Err("signature has no structures".into());
        }
        for (i, s) in self.structures.iter().enumerate() {
            match s {
                Structure::ParentsChildren(pc) => {
                    if pc.parent.is_empty() {
                        return Err(format!("structures[{i}]: empty parent"));
                    }
                    if pc.children.is_empty() || pc.children.iter().any(Vec::is_empty) {
                        return Err(format!("structures[{i}]: missing or empty child"));
                    }
                    if self.kind == SignatureKind::Delete {
                        return Err(format!("structures[{i}]: delete signatures hold block lists only"));
                    }
                }
                Structure::BlockList(bl) => {
                    if bl.blocks.is_empty() || bl.blocks.iter().any(Vec::is_empty) {
                        return Err(format!("structures[{i}]: missing or empty block"));
                    }
                    if self.kind == SignatureKind::Add {
                        return Err(format!(
                            "structures[{i}]: add signatures hold parents-children structures only"
                        ));
                    }
                }
            }
        }
        if let Some(p) = &self.patch_signature {
            if self.kind == SignatureKind::Delete {
                return Err("delete signatures carry no patch signature".into());
            }
            if p.blocks.is_empty() || p.blocks.iter().any(Vec::is_empty) {
                return Err("patch_signature: missing or empty block".into());
            }
        }
        let total: usize = self.structures.iter().map(Structure::instruction_count).sum();
        if total != self.total_instructions {
            return Err(format!(
                "total_instructions is {} but structures hold {total}",
                self.total_instructions
            ));
        }
        Ok(())
    }
}
