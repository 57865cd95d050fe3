//! Interchange model for disassembled functions.
//!
//! A [`BinaryFunction`] is a control-flow graph of [`BasicBlock`]s plus the
//! debug line table that maps instruction addresses back to source lines.
//! Functions are read from and written to the `vulmatch-func/1` JSON document
//! format; every structural invariant is checked at load time so the rest of
//! the crate can index blocks and edges without re-validating.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FUNC_SCHEMA: &str = "vulmatch-func/1";

/// Placeholder substituted for absolute branch and call targets.
pub const TARGET_PLACEHOLDER: &str = "@tgt";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("schema error at {path}: {reason}")]
    Schema { path: String, reason: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ModelError {
    fn invalid(msg: impl Into<String>) -> Self {
        ModelError::Validation(msg.into())
    }
}

/// Identifier of a basic block, unique within its function.
///
/// Ordering is "natural": ids that parse as unsigned integers sort
/// numerically and before any non-numeric id, so `"9" < "10"`.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlockId(pub String);

impl BlockId {
    pub fn new(id: impl Into<String>) -> Self {
        BlockId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl Ord for BlockId {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self.0.parse::<u64>(), other.0.parse::<u64>()) {
            (Ok(a), Ok(b)) => a.cmp(&b).then_with(|| self.0.cmp(&other.0)),
            (Ok(_), Err(_)) => Ordering::Less,
            (Err(_), Ok(_)) => Ordering::Greater,
            (Err(_), Err(_)) => self.0.cmp(&other.0),
        }
    }
}

impl PartialOrd for BlockId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Debug for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for BlockId {
    fn from(s: &str) -> Self {
        BlockId(s.to_owned())
    }
}

/// A source location as recorded in the debug line table.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SourceLine {
    pub file: String,
    pub line: u32,
}

impl SourceLine {
    pub fn new(file: impl Into<String>, line: u32) -> Self {
        SourceLine {
            file: file.into(),
            line,
        }
    }
}

/// True when two file labels name the same source file: either equal, or one
/// is a `/`-bounded path suffix of the other (`lib/tftp.c` vs `/src/curl/lib/tftp.c`).
pub fn same_source_file(a: &str, b: &str) -> bool {
    if a == b {
        return true;
    }
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    !short.is_empty()
        && long.ends_with(short)
        && long.as_bytes()[long.len() - short.len() - 1] == b'/'
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    pub address: u64,
    pub mnemonic: String,
    pub operands: Vec<String>,
    pub raw_text: String,
}

const PREFIXES: &[&str] = &[
    "rep", "repe", "repz", "repne", "repnz", "lock", "notrack", "bnd", "data16", "addr32",
];

impl Instruction {
    /// Split disassembly text into a mnemonic and comma-separated operands.
    /// Commas nested in brackets or parentheses do not split. Legacy prefixes
    /// (`rep`, `lock`, ...) are folded into the mnemonic.
    pub fn parse(address: u64, text: &str) -> Option<Instruction> {
        let trimmed = text.trim();
        let mut rest = trimmed;
        let mut mnemonic = String::new();
        loop {
            let (word, tail) = match rest.find(char::is_whitespace) {
                Some(i) => (&rest[..i], rest[i..].trim_start()),
                None => (rest, ""),
            };
            if word.is_empty() {
                break;
            }
            if !mnemonic.is_empty() {
                mnemonic.push(' ');
            }
            mnemonic.push_str(&word.to_ascii_lowercase());
            rest = tail;
            if !PREFIXES.contains(&word.to_ascii_lowercase().as_str()) || rest.is_empty() {
                break;
            }
        }
        if mnemonic.is_empty() {
            return None;
        }
        Some(Instruction {
            address,
            mnemonic,
            operands: split_operands(rest),
            raw_text: trimmed.to_owned(),
        })
    }

    pub fn normalized(&self) -> NormInsn {
        normalize_instruction(self)
    }
}

fn split_operands(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for c in s.chars() {
        match c {
            '[' | '(' | '{' | '<' => depth += 1,
            ']' | ')' | '}' | '>' => depth -= 1,
            _ => {}
        }
        if c == ',' && depth <= 0 {
            out.push(std::mem::take(&mut cur).trim().to_owned());
        } else {
            cur.push(c);
        }
    }
    let last = cur.trim();
    if !last.is_empty() || !out.is_empty() {
        out.push(last.to_owned());
    }
    out
}

/// Instruction in canonical form: the unit of equality for all matching.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NormInsn {
    pub mnemonic: String,
    pub operands: Vec<String>,
}

impl NormInsn {
    /// Parse and normalize a disassembly line in one step.
    pub fn from_text(text: &str) -> Option<NormInsn> {
        Instruction::parse(0, text).map(|i| i.normalized())
    }

    /// Stable 64-bit key used to short-circuit equality in the hot loops.
    pub fn key(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.hash(&mut h);
        h.finish()
    }
}

impl fmt::Display for NormInsn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.mnemonic)?;
        for (i, op) in self.operands.iter().enumerate() {
            f.write_str(if i == 0 { " " } else { ", " })?;
            f.write_str(op)?;
        }
        Ok(())
    }
}

fn canonical_ws(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_ascii_lowercase()
}

fn is_branch_mnemonic(m: &str) -> bool {
    let m = m.rsplit(' ').next().unwrap_or(m);
    m.starts_with('j') || m.starts_with("call") || m.starts_with("loop") || m == "xbegin"
}

/// An operand is an absolute code address when its first token is a hex
/// literal (`0x401050`, or objdump's bare `401050 <sym+0x10>` form).
fn is_absolute_target(op: &str) -> bool {
    let first = op.split_whitespace().next().unwrap_or("");
    let digits = first
        .strip_prefix("0x")
        .or_else(|| first.strip_prefix("0X"))
        .unwrap_or(first);
    !digits.is_empty() && digits.chars().all(|c| c.is_ascii_hexdigit())
}

pub fn normalize_instruction(instr: &Instruction) -> NormInsn {
    let mnemonic = canonical_ws(&instr.mnemonic);
    let branch = is_branch_mnemonic(&mnemonic);
    let operands = instr
        .operands
        .iter()
        .map(|op| {
            let op = canonical_ws(op);
            if branch && is_absolute_target(&op) {
                TARGET_PLACEHOLDER.to_owned()
            } else {
                op
            }
        })
        .collect();
    NormInsn { mnemonic, operands }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BasicBlock {
    pub id: BlockId,
    pub instructions: Vec<Instruction>,
    pub successors: Vec<BlockId>,
}

impl BasicBlock {
    pub fn start(&self) -> u64 {
        self.instructions[0].address
    }

    pub fn end(&self) -> u64 {
        self.instructions[self.instructions.len() - 1].address
    }

    pub fn normalized(&self) -> Vec<NormInsn> {
        self.instructions.iter().map(normalize_instruction).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineEntry {
    #[serde(with = "hex_addr")]
    pub addr: u64,
    pub file: String,
    pub line: u32,
}

/// A validated disassembled function. Immutable after construction.
#[derive(Debug, Clone)]
pub struct BinaryFunction {
    pub name: String,
    pub binary_id: String,
    pub entry: BlockId,
    blocks: Vec<BasicBlock>,
    line_map: Vec<LineEntry>,
    index: HashMap<BlockId, usize>,
    preds: Vec<Vec<usize>>,
    succs: Vec<Vec<usize>>,
    lines_by_addr: HashMap<u64, Vec<SourceLine>>,
}

impl BinaryFunction {
    /// Build and validate a function from its parts.
    pub fn new(
        name: impl Into<String>,
        binary_id: impl Into<String>,
        entry: BlockId,
        blocks: Vec<BasicBlock>,
        line_map: Vec<LineEntry>,
    ) -> Result<Self, ModelError> {
        let name = name.into();
        if blocks.is_empty() {
            return Err(ModelError::invalid("function has no blocks"));
        }
        let mut index = HashMap::new();
        for (i, b) in blocks.iter().enumerate() {
            if index.insert(b.id.clone(), i).is_some() {
                return Err(ModelError::invalid(format!("duplicate block id {}", b.id)));
            }
            if b.instructions.is_empty() {
                return Err(ModelError::invalid(format!("empty block {}", b.id)));
            }
            for w in b.instructions.windows(2) {
                if w[1].address <= w[0].address {
                    return Err(ModelError::invalid(format!(
                        "block {}: addresses not strictly increasing at {:#x}",
                        b.id, w[1].address
                    )));
                }
            }
        }
        if !index.contains_key(&entry) {
            return Err(ModelError::invalid(format!("entry block {entry} not found")));
        }
        let mut succs = vec![Vec::new(); blocks.len()];
        let mut preds = vec![Vec::new(); blocks.len()];
        for (i, b) in blocks.iter().enumerate() {
            let mut seen = HashSet::new();
            for s in &b.successors {
                let Some(&j) = index.get(s) else {
                    return Err(ModelError::invalid(format!(
                        "dangling successor {s} in block {}",
                        b.id
                    )));
                };
                if !seen.insert(j) {
                    return Err(ModelError::invalid(format!(
                        "duplicate successor {s} in block {}",
                        b.id
                    )));
                }
                succs[i].push(j);
                preds[j].push(i);
            }
        }
        let mut ranges: Vec<(u64, u64, &BlockId)> =
            blocks.iter().map(|b| (b.start(), b.end(), &b.id)).collect();
        ranges.sort();
        for w in ranges.windows(2) {
            if w[1].0 <= w[0].1 {
                return Err(ModelError::invalid(format!(
                    "overlapping blocks {} and {}",
                    w[0].2, w[1].2
                )));
            }
        }
        let addrs: HashSet<u64> = blocks
            .iter()
            .flat_map(|b| b.instructions.iter().map(|i| i.address))
            .collect();
        let mut lines_by_addr: HashMap<u64, Vec<SourceLine>> = HashMap::new();
        for e in &line_map {
            if !addrs.contains(&e.addr) {
                return Err(ModelError::invalid(format!(
                    "unmapped address {:#x} in line_map",
                    e.addr
                )));
            }
            if e.line == 0 {
                return Err(ModelError::invalid(format!(
                    "line_map entry at {:#x} has line 0",
                    e.addr
                )));
            }
            let lines = lines_by_addr.entry(e.addr).or_default();
            let sl = SourceLine::new(e.file.clone(), e.line);
            if !lines.contains(&sl) {
                lines.push(sl);
            }
        }
        for v in preds.iter_mut().chain(succs.iter_mut()) {
            v.sort_by(|&a, &b| blocks[a].id.cmp(&blocks[b].id));
        }
        Ok(BinaryFunction {
            name,
            binary_id: binary_id.into(),
            entry,
            blocks,
            line_map,
            index,
            preds,
            succs,
            lines_by_addr,
        })
    }

    pub fn blocks(&self) -> &[BasicBlock] {
        &self.blocks
    }

    pub fn line_map(&self) -> &[LineEntry] {
        &self.line_map
    }

    pub fn block(&self, id: &BlockId) -> Option<&BasicBlock> {
        self.index.get(id).map(|&i| &self.blocks[i])
    }

    pub fn contains_block(&self, id: &BlockId) -> bool {
        self.index.contains_key(id)
    }

    /// Successor ids in natural id order.
    pub fn successors(&self, id: &BlockId) -> Vec<&BlockId> {
        self.index
            .get(id)
            .map(|&i| self.succs[i].iter().map(|&j| &self.blocks[j].id).collect())
            .unwrap_or_default()
    }

    /// Predecessor ids in natural id order.
    pub fn predecessors(&self, id: &BlockId) -> Vec<&BlockId> {
        self.index
            .get(id)
            .map(|&i| self.preds[i].iter().map(|&j| &self.blocks[j].id).collect())
            .unwrap_or_default()
    }

    /// Block ids in natural order.
    pub fn block_ids(&self) -> Vec<&BlockId> {
        let mut ids: Vec<&BlockId> = self.blocks.iter().map(|b| &b.id).collect();
        ids.sort();
        ids
    }

    /// Source lines recorded for one instruction address.
    pub fn lines_at(&self, addr: u64) -> &[SourceLine] {
        self.lines_by_addr
            .get(&addr)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Union of source lines mapped from any instruction of the block.
    pub fn block_lines(&self, id: &BlockId) -> BTreeSet<SourceLine> {
        self.block(id)
            .into_iter()
            .flat_map(|b| b.instructions.iter())
            .flat_map(|i| self.lines_at(i.address).iter().cloned())
            .collect()
    }

    pub fn instruction_count(&self) -> usize {
        self.blocks.iter().map(|b| b.instructions.len()).sum()
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        load_function(text)
    }

    pub fn load_path(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        load_function(&text)
    }

    pub fn to_document(&self) -> FunctionDocument {
        FunctionDocument {
            schema: FUNC_SCHEMA.to_owned(),
            binary_id: self.binary_id.clone(),
            name: self.name.clone(),
            entry: self.entry.0.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockDocument {
                    id: b.id.0.clone(),
                    successors: b.successors.iter().map(|s| s.0.clone()).collect(),
                    insns: b
                        .instructions
                        .iter()
                        .map(|i| InsnDocument {
                            addr: i.address,
                            text: i.raw_text.clone(),
                        })
                        .collect(),
                })
                .collect(),
            line_map: self.line_map.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("function document serializes")
    }

    /// Same function under a different name and binary label.
    pub fn renamed(&self, name: impl Into<String>, binary_id: impl Into<String>) -> Self {
        let mut f = self.clone();
        f.name = name.into();
        f.binary_id = binary_id.into();
        f
    }

    /// Copy of the function with the debug line table removed.
    pub fn stripped(&self) -> Self {
        let mut f = self.clone();
        f.line_map.clear();
        f.lines_by_addr.clear();
        f
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionDocument {
    pub schema: String,
    pub binary_id: String,
    pub name: String,
    pub entry: String,
    pub blocks: Vec<BlockDocument>,
    #[serde(default)]
    pub line_map: Vec<LineEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockDocument {
    pub id: String,
    #[serde(default)]
    pub successors: Vec<String>,
    pub insns: Vec<InsnDocument>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InsnDocument {
    #[serde(with = "hex_addr")]
    pub addr: u64,
    pub text: String,
}

impl FunctionDocument {
    pub fn into_function(self) -> Result<BinaryFunction, ModelError> {
        if self.schema != FUNC_SCHEMA {
            return Err(ModelError::Schema {
                path: "schema".into(),
                reason: format!("expected {FUNC_SCHEMA:?}, found {:?}", self.schema),
            });
        }
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (bi, b) in self.blocks.into_iter().enumerate() {
            let mut instructions = Vec::with_capacity(b.insns.len());
            for (ii, insn) in b.insns.into_iter().enumerate() {
                let parsed =
                    Instruction::parse(insn.addr, &insn.text).ok_or_else(|| ModelError::Schema {
                        path: format!("blocks[{bi}].insns[{ii}].text"),
                        reason: "empty instruction text".into(),
                    })?;
                instructions.push(parsed);
            }
            blocks.push(BasicBlock {
                id: BlockId(b.id),
                instructions,
                successors: b.successors.into_iter().map(BlockId).collect(),
            });
        }
        BinaryFunction::new(
            self.name,
            self.binary_id,
            BlockId(self.entry),
            blocks,
            self.line_map,
        )
    }
}

/// Parse and validate one `vulmatch-func/1` document.
pub fn load_function(document: &str) -> Result<BinaryFunction, ModelError> {
    let de = &mut serde_json::Deserializer::from_str(document);
    let doc: FunctionDocument =
        serde_path_to_error::deserialize(de).map_err(|e| ModelError::Schema {
            path: e.path().to_string(),
            reason: e.inner().to_string(),
        })?;
    doc.into_function()
}

/// Load every `*.json` function document in a directory, sorted by file name.
pub fn load_function_dir(dir: &Path) -> Result<Vec<BinaryFunction>, ModelError> {
    let io = |source| ModelError::Io {
        path: dir.display().to_string(),
        source,
    };
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            BinaryFunction::load_path(p).map_err(|e| match e {
                ModelError::Schema { path, reason } => ModelError::Schema {
                    path: format!("{}: {path}", p.display()),
                    reason,
                },
                ModelError::Validation(m) => ModelError::Validation(format!("{}: {m}", p.display())),
                other => other,
            })
        })
        .collect()
}

/// Assembles a [`BinaryFunction`] from literal instruction text, assigning
/// consecutive 4-byte addresses in block order. A line number of 0 leaves
/// the instruction out of the line table.
type PendingBlock = (String, Vec<String>, Vec<(String, u32)>);

#[derive(Debug, Clone)]
pub struct FunctionBuilder {
    name: String,
    binary_id: String,
    file: String,
    base: u64,
    blocks: Vec<PendingBlock>,
}

impl FunctionBuilder {
    pub fn new(name: &str, binary_id: &str, file: &str) -> Self {
        FunctionBuilder {
            name: name.to_owned(),
            binary_id: binary_id.to_owned(),
            file: file.to_owned(),
            base: 0x401000,
            blocks: Vec::new(),
        }
    }

    pub fn base(mut self, addr: u64) -> Self {
        self.base = addr;
        self
    }

    pub fn block<S: AsRef<str>>(mut self, id: &str, succs: &[&str], insns: &[(S, u32)]) -> Self {
        self.blocks.push((
            id.to_owned(),
            succs.iter().map(|s| s.to_string()).collect(),
            insns
                .iter()
                .map(|(t, l)| (t.as_ref().to_owned(), *l))
                .collect(),
        ));
        self
    }

    /// Address the next instruction would receive.
    pub fn next_address(&self) -> u64 {
        self.base + 4 * self.blocks.iter().map(|b| b.2.len() as u64).sum::<u64>()
    }

    pub fn build(self) -> Result<BinaryFunction, ModelError> {
        let entry = self
            .blocks
            .first()
            .map(|b| BlockId(b.0.clone()))
            .ok_or_else(|| ModelError::invalid("function has no blocks"))?;
        let mut addr = self.base;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut line_map = Vec::new();
        for (id, succs, insns) in self.blocks {
            let mut instructions = Vec::with_capacity(insns.len());
            for (text, line) in insns {
                let insn = Instruction::parse(addr, &text)
                    .ok_or_else(|| ModelError::invalid(format!("empty instruction in block {id}")))?;
                if line > 0 {
                    line_map.push(LineEntry {
                        addr,
                        file: self.file.clone(),
                        line,
                    });
                }
                instructions.push(insn);
                addr += 4;
            }
            blocks.push(BasicBlock {
                id: BlockId(id),
                instructions,
                successors: succs.into_iter().map(BlockId).collect(),
            });
        }
        BinaryFunction::new(self.name, self.binary_id, entry, blocks, line_map)
    }
}

/// Instructions whose line-table entry falls in `lines`, grouped by block.
pub fn map_lines_to_instructions<'f>(
    func: &'f BinaryFunction,
    lines: &BTreeSet<SourceLine>,
) -> BTreeMap<BlockId, Vec<&'f Instruction>> {
    let mut out: BTreeMap<BlockId, Vec<&Instruction>> = BTreeMap::new();
    if lines.is_empty() {
        return out;
    }
    for b in func.blocks() {
        for insn in &b.instructions {
            if func
                .lines_at(insn.address)
                .iter()
                .any(|l| contains_line(lines, l))
            {
                out.entry(b.id.clone()).or_default().push(insn);
            }
        }
    }
    out
}

/// Membership test that tolerates differently-qualified file labels.
pub fn contains_line(lines: &BTreeSet<SourceLine>, l: &SourceLine) -> bool {
    lines.contains(l)
        || lines
            .iter()
            .any(|x| x.line == l.line && same_source_file(&x.file, &l.file))
}

pub(crate) mod hex_addr {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:#x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        let digits = s
            .strip_prefix("0x")
            .or_else(|| s.strip_prefix("0X"))
            .ok_or_else(|| D::Error::custom(format!("address {s:?} lacks 0x prefix")))?;
        u64::from_str_radix(digits, 16)
            .map_err(|e| D::Error::custom(format!("bad address {s:?}: {e}")))
    }
}
