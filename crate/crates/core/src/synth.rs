//! Synthetic function pairs and corpora.
//!
//! A small "compiler" renders a block-structured toy program both as C-like
//! source text and as a disassembled [`BinaryFunction`] with a line table.
//! Patching the program (insert a guarded check, delete statements, change
//! statements) and recompiling yields realistic (vulnerable, patched) pairs:
//! unchanged statements keep their text and instructions, every block moves
//! to a new address, and branch targets shift accordingly.
//!
//! Used by the examples, the integration tests and the benchmarks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binmodel::{BinaryFunction, FunctionBuilder};
use crate::siggen::SignatureKind;

const REGS: &[&str] = &[
    "rax", "rbx", "rcx", "rdx", "rsi", "rdi", "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15",
];

#[derive(Debug, Clone)]
struct Stmt {
    text: String,
    insns: Vec<String>,
}

#[derive(Debug, Clone)]
struct Block {
    id: String,
    stmts: Vec<Stmt>,
    succs: Vec<String>,
}

#[derive(Debug, Clone)]
struct Program {
    name: String,
    blocks: Vec<Block>,
}

struct Gen {
    rng: ChaCha8Rng,
    counter: u32,
    tag: u64,
}

impl Gen {
    fn new(seed: u64) -> Self {
        Gen {
            rng: ChaCha8Rng::seed_from_u64(seed),
            counter: 0,
            tag: seed,
        }
    }

    fn reg(&mut self) -> &'static str {
        REGS.choose(&mut self.rng).copied().unwrap_or("rax")
    }

    fn insn(&mut self) -> String {
        let imm: u32 = self.rng.gen_range(1..0x100);
        let off: u32 = self.rng.gen_range(1..0x40) * 8;
        let (a, b) = (self.reg(), self.reg());
        match self.rng.gen_range(0..10) {
            0 => format!("mov {a}, {b}"),
            1 => format!("mov {a}, qword ptr [rbp - {off:#x}]"),
            2 => format!("mov qword ptr [rbp - {off:#x}], {a}"),
            3 => format!("add {a}, {imm:#x}"),
            4 => format!("sub {a}, {imm:#x}"),
            5 => format!("lea {a}, [{b} + {imm:#x}]"),
            6 => format!("xor {a}, {b}"),
            7 => format!("imul {a}, {b}"),
            8 => format!("call {:#x}", 0x400000 + self.rng.gen_range(0..0x1000u32) * 16),
            _ => format!("test {a}, {b}"),
        }
    }

    /// Instruction guaranteed not to occur in any other generated function.
    fn unique_insn(&mut self) -> String {
        self.counter += 1;
        let r = self.reg();
        format!(
            "mov {r}, qword ptr [{r} + {:#x}]",
            0x1000_0000u64 + (self.tag % 0x10_0000) * 0x100 + u64::from(self.counter)
        )
    }

    fn stmt(&mut self) -> Stmt {
        self.counter += 1;
        let var = self.counter;
        if self.rng.gen_bool(0.1) {
            return Stmt {
                text: format!("    long v{var}_{};", self.tag),
                insns: Vec::new(),
            };
        }
        let n = self.rng.gen_range(1..=3);
        Stmt {
            text: format!("    v{var}_{} = step({var});", self.tag),
            insns: (0..n).map(|_| self.insn()).collect(),
        }
    }

    fn code_stmt(&mut self) -> Stmt {
        loop {
            let s = self.stmt();
            if !s.insns.is_empty() {
                return s;
            }
        }
    }

    fn block(&mut self, id: String) -> Block {
        let n = self.rng.gen_range(1..=3);
        let mut stmts: Vec<Stmt> = (0..n).map(|_| self.stmt()).collect();
        stmts.push(self.code_stmt());
        Block {
            id,
            stmts,
            succs: Vec::new(),
        }
    }

    fn program(&mut self, name: &str, n_blocks: usize) -> Program {
        let mut blocks: Vec<Block> = (1..=n_blocks).map(|i| self.block(i.to_string())).collect();
        for i in 0..n_blocks {
            if i + 1 == n_blocks {
                continue;
            }
            let mut succs = vec![blocks[i + 1].id.clone()];
            if i + 2 < n_blocks && self.rng.gen_bool(0.4) {
                let j = self.rng.gen_range(i + 2..n_blocks);
                succs.push(blocks[j].id.clone());
            } else if i > 0 && self.rng.gen_bool(0.1) {
                let j = self.rng.gen_range(0..i);
                succs.push(blocks[j].id.clone());
            }
            blocks[i].succs = succs;
        }
        Program {
            name: name.to_owned(),
            blocks,
        }
    }
}

impl Program {
    fn source(&self) -> String {
        let mut s = format!("long {}(long a, long b)\n{{\n", self.name);
        for b in &self.blocks {
            for st in &b.stmts {
                s.push_str(&st.text);
                s.push('\n');
            }
        }
        s.push_str("}\n");
        s
    }

    /// Compile to a function. Terminators are derived from the CFG and the
    /// final layout: a conditional jump to the second successor, an explicit
    /// `jmp` when the first successor is not the next block, `ret` at exits.
    fn compile(&self, binary_id: &str, file: &str, base: u64) -> BinaryFunction {
        let header_line = 2u32; // the opening brace
        let mut line = 3u32;
        let mut body: Vec<Vec<(String, u32)>> = Vec::new();
        let mut last_line = Vec::new();
        for b in &self.blocks {
            let mut insns = Vec::new();
            let mut last = header_line;
            for st in &b.stmts {
                for i in &st.insns {
                    insns.push((i.clone(), line));
                    last = line;
                }
                line += 1;
            }
            body.push(insns);
            last_line.push(last);
        }
        // prologue on the entry block
        body[0].insert(0, ("push rbp".into(), header_line));
        body[0].insert(1, ("mov rbp, rsp".into(), header_line));

        let terminators = |addrs: &[u64]| -> Vec<Vec<String>> {
            self.blocks
                .iter()
                .enumerate()
                .map(|(i, b)| {
                    let pos = |id: &str| self.blocks.iter().position(|x| x.id == id).expect("succ");
                    let mut t = Vec::new();
                    match b.succs.as_slice() {
                        [] => t.push("ret".to_owned()),
                        [first, rest @ ..] => {
                            for s in rest {
                                t.push(format!("jne {:#x}", addrs[pos(s)]));
                            }
                            if pos(first) != i + 1 {
                                t.push(format!("jmp {:#x}", addrs[pos(first)]));
                            }
                        }
                    }
                    t
                })
                .collect()
        };
        // Two passes: terminator sizes do not depend on addresses.
        let sizes: Vec<usize> = terminators(&vec![0; self.blocks.len()])
            .iter()
            .zip(&body)
            .map(|(t, b)| t.len() + b.len())
            .collect();
        let mut addrs = Vec::with_capacity(sizes.len());
        let mut a = base;
        for s in &sizes {
            addrs.push(a);
            a += 4 * *s as u64;
        }
        let terms = terminators(&addrs);
        let mut fb = FunctionBuilder::new(&self.name, binary_id, file).base(base);
        for (i, b) in self.blocks.iter().enumerate() {
            let mut insns = body[i].clone();
            insns.extend(terms[i].iter().map(|t| (t.clone(), last_line[i])));
            let succs: Vec<&str> = b.succs.iter().map(String::as_str).collect();
            fb = fb.block(&b.id, &succs, &insns);
        }
        fb.build().expect("synthetic programs compile to valid functions")
    }

    fn pos(&self, id: &str) -> usize {
        self.blocks.iter().position(|b| b.id == id).expect("block exists")
    }
}

/// A generated (vulnerable, patched) pair with both source versions.
#[derive(Debug, Clone)]
pub struct SynthPair {
    pub cve_id: String,
    pub intended: SignatureKind,
    pub vulnerable: BinaryFunction,
    pub patched: BinaryFunction,
    pub old_src: String,
    pub new_src: String,
    pub source_file: String,
}

/// Generate a pair whose source patch is of the given kind.
pub fn synth_pair(seed: u64, kind: SignatureKind) -> SynthPair {
    let mut g = Gen::new(seed);
    let name = format!("func_{seed}");
    let file = format!("src/mod_{seed}.c");
    let n_blocks = g.rng.gen_range(4..=9);
    let old = g.program(&name, n_blocks);
    let mut new = old.clone();

    match kind {
        SignatureKind::Add => {
            // guard inserted on an edge X -> Y
            let candidates: Vec<usize> = (0..new.blocks.len())
                .filter(|&i| !new.blocks[i].succs.is_empty())
                .collect();
            let xi = *candidates.choose(&mut g.rng).expect("non-exit block");
            let y = new.blocks[xi].succs[0].clone();
            let (n1, n2) = ("n1".to_owned(), "n2".to_owned());
            g.counter += 1;
            let c = g.counter;
            let check = Stmt {
                text: format!("    if (v{c}_{} > limit) {{", g.tag),
                insns: vec![g.unique_insn(), format!("cmp rax, {:#x}", 0x7000 + c)],
            };
            let fix = Stmt {
                text: format!("        v{c}_{} = limit; /* clamp */", g.tag),
                insns: vec![g.unique_insn(), g.unique_insn()],
            };
            let close = Stmt {
                text: format!("    }} /* v{c} */"),
                insns: Vec::new(),
            };
            new.blocks[xi].succs[0] = n1.clone();
            new.blocks.insert(
                xi + 1,
                Block {
                    id: n1.clone(),
                    stmts: vec![check],
                    succs: vec![n2.clone(), y.clone()],
                },
            );
            new.blocks.insert(
                xi + 2,
                Block {
                    id: n2,
                    stmts: vec![fix, close],
                    succs: vec![y],
                },
            );
        }
        SignatureKind::Delete => {
            // the fix removes statements: the vulnerable build has extra code
            let mut old = old;
            let nb = old.blocks.len();
            let count = g.rng.gen_range(1..=nb.min(3));
            let mut picks: Vec<usize> = (0..nb).collect();
            picks.shuffle(&mut g.rng);
            for &bi in picks.iter().take(count) {
                let at = g.rng.gen_range(0..old.blocks[bi].stmts.len());
                let extra = Stmt {
                    text: format!("    unsafe_op_{}_{bi}();", g.tag),
                    insns: vec![g.unique_insn(), g.insn()],
                };
                old.blocks[bi].stmts.insert(at, extra);
            }
            return finish(seed, kind, old, new, &file);
        }
        SignatureKind::ChangeOneBlock | SignatureKind::ChangeManyBlock => {
            let nb = new.blocks.len();
            let targets: Vec<usize> = if kind == SignatureKind::ChangeOneBlock {
                vec![g.rng.gen_range(0..nb)]
            } else {
                // an adjacent pair plus, sometimes, an unrelated block
                let a = (0..nb)
                    .filter(|&i| !new.blocks[i].succs.is_empty())
                    .collect::<Vec<_>>();
                let ai = *a.choose(&mut g.rng).expect("non-exit block");
                let bi = new.pos(&new.blocks[ai].succs[0].clone());
                let mut t = vec![ai, bi];
                if nb > 3 && g.rng.gen_bool(0.5) {
                    let far = (0..nb).find(|i| {
                        !t.contains(i)
                            && !new.blocks[*i].succs.iter().any(|s| {
                                t.iter().any(|&x| new.blocks[x].id == *s)
                            })
                            && !t.iter().any(|&x| new.blocks[x].succs.contains(&new.blocks[*i].id))
                    });
                    t.extend(far);
                }
                t.sort_unstable();
                t.dedup();
                t
            };
            for bi in targets {
                let b = &mut new.blocks[bi];
                let k = b
                    .stmts
                    .iter()
                    .position(|s| !s.insns.is_empty())
                    .expect("every block has code");
                g.counter += 1;
                let c = g.counter;
                let keep = b.stmts[k].insns[0].clone();
                let fresh = g.unique_insn();
                let b = &mut new.blocks[bi];
                b.stmts[k] = Stmt {
                    text: format!("    v{c}_{} = checked_step({c});", g.tag),
                    insns: vec![keep, fresh],
                };
            }
        }
    }
    finish(seed, kind, old, new, &file)
}

fn finish(seed: u64, kind: SignatureKind, old: Program, new: Program, file: &str) -> SynthPair {
    let cve_id = format!("CVE-2099-{:05}", seed % 100_000);
    SynthPair {
        cve_id,
        intended: kind,
        vulnerable: old.compile(&format!("synth-{seed}-vuln"), file, 0x401000),
        patched: new.compile(&format!("synth-{seed}-patched"), file, 0x501000),
        old_src: old.source(),
        new_src: new.source(),
        source_file: file.to_owned(),
    }
}

/// A random function unrelated to any pair.
pub fn synth_function(seed: u64, name: &str, binary_id: &str) -> BinaryFunction {
    let mut g = Gen::new(seed ^ 0x5eed_0000_0000);
    let n = g.rng.gen_range(3..=12);
    let p = g.program(name, n);
    p.compile(binary_id, &format!("src/{name}.c"), 0x600000 + (seed % 4096) * 0x1000)
}

/// Round-robin over the four signature kinds.
pub fn kind_for(i: usize) -> SignatureKind {
    [
        SignatureKind::Add,
        SignatureKind::Delete,
        SignatureKind::ChangeOneBlock,
        SignatureKind::ChangeManyBlock,
    ][i % 4]
}

/// A hand-built pair with its two source versions.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub vulnerable: BinaryFunction,
    pub patched: BinaryFunction,
    pub old_src: String,
    pub new_src: String,
    pub source_file: String,
}

impl Scenario {
    pub fn sites(&self) -> (crate::diffcore::EditScript, Vec<crate::diffcore::PatchSite>) {
        crate::diffcore::diff_sources(&self.old_src, &self.new_src)
    }

    pub fn context(&self) -> crate::siggen::PairContext<'_> {
        let (script, _) = self.sites();
        crate::siggen::PairContext {
            vulnerable: &self.vulnerable,
            patched: &self.patched,
            source_file: self.source_file.clone(),
            correspondence: crate::diffcore::LineCorrespondence::from_script(&script),
        }
    }
}

/// Two add batches, {4,5,6} entered from block 1 and {9,10} entered from 7.
///
/// ```text
/// patched:    1 -> 2, 4     vulnerable:  1 -> 2
///             2 -> 3                     2 -> 3
///             3 -> 7                     3 -> 7
///             4 -> 5 -> 6 -> 7           7 -> 8
///             7 -> 8, 9
///             9 -> 10 -> 8
/// ```
pub fn figure_scenario() -> Scenario {
    let file = "src/figure.c";
    let old_src = "int figure(int a)\n{\n    s1(a);\n    s2(a);\n    s3(a);\n    s7(a);\n    s8(a);\n}\n";
    let new_src = "int figure(int a)\n{\n    s1(a);\n    if (a > 4) { a4(a);\n        a5(a);\n        a6(a); }\n    s2(a);\n    s3(a);\n    s7(a);\n    if (a < 0) { a9(a);\n        a10(a); }\n    s8(a);\n}\n";
    let vulnerable = FunctionBuilder::new("figure", "figure-vuln", file)
        .base(0x1000)
        .block("1", &["2"], &[("push rbp", 2), ("mov rbp, rsp", 2), ("call 0x2000", 3)])
        .block("2", &["3"], &[("mov edi, ebx", 4), ("call 0x2010", 4)])
        .block("3", &["7"], &[("mov edi, ebx", 5), ("call 0x2020", 5)])
        .block("7", &["8"], &[("mov edi, ebx", 6), ("call 0x2030", 6)])
        .block("8", &[], &[("mov edi, ebx", 7), ("call 0x2040", 7), ("pop rbp", 7), ("ret", 7)])
        .build()
        .expect("valid fixture");
    let patched = FunctionBuilder::new("figure", "figure-patched", file)
        .base(0x5000)
        .block(
            "1",
            &["2", "4"],
            &[("push rbp", 2), ("mov rbp, rsp", 2), ("call 0x2000", 3), ("cmp ebx, 4", 4), ("jg 0x5020", 4)],
        )
        .block("2", &["3"], &[("mov edi, ebx", 7), ("call 0x2010", 7)])
        .block("3", &["7"], &[("mov edi, ebx", 8), ("call 0x2020", 8)])
        .block("4", &["5"], &[("mov edi, ebx", 4), ("call 0x2050", 4)])
        .block("5", &["6"], &[("mov edi, ebx", 5), ("call 0x2060", 5)])
        .block("6", &["7"], &[("mov edi, ebx", 6), ("call 0x2070", 6), ("jmp 0x5040", 6)])
        .block("7", &["8", "9"], &[("mov edi, ebx", 9), ("call 0x2030", 9), ("test ebx, ebx", 10), ("js 0x5060", 10)])
        .block("9", &["10"], &[("mov edi, ebx", 10), ("call 0x2080", 10)])
        .block("10", &["8"], &[("mov edi, ebx", 11), ("call 0x2090", 11)])
        .block("8", &[], &[("mov edi, ebx", 12), ("call 0x2040", 12), ("pop rbp", 12), ("ret", 12)])
        .build()
        .expect("valid fixture");
    Scenario {
        vulnerable,
        patched,
        old_src: old_src.into(),
        new_src: new_src.into(),
        source_file: file.into(),
    }
}

/// A buffer-size check inserted between blocks 2 and 7, plus one changed
/// line in the entry block. Blocks 4 and 5 of the patched build differ from
/// anything in the vulnerable build but map to unchanged source lines.
///
/// ```text
/// vulnerable:  1 -> 2, 8      patched:  1 -> 2, 8
///              2 -> 7                   2 -> 3 -> 6, 4
///                                       6 -> 4 -> 5 -> 7
/// ```
pub fn motivating_scenario() -> Scenario {
    let file = "lib/tftp.c";
    let old_src = "\
static CURLcode tftp_connect(struct connectdata *conn, bool *done)
{
  tftp_state_data_t *state;
  int blksize = TFTP_BLKSIZE_DEFAULT;
  state = calloc(1, sizeof(tftp_state_data_t));
  if(!state)
    return CURLE_OUT_OF_MEMORY;
  if(conn->data->set.tftp_blksize)
    blksize = (int)conn->data->set.tftp_blksize;
  state->blksize = blksize;
  return CURLE_OK;
}
";
    let new_src = "\
static CURLcode tftp_connect(struct connectdata *conn, bool *done)
{
  tftp_state_data_t *state;
  int blksize = TFTP_BLKSIZE_DEFAULT;
  state = conn->proto.tftpc = calloc(1, sizeof(tftp_state_data_t));
  if(!state)
    return CURLE_OUT_OF_MEMORY;
  if(conn->data->set.tftp_blksize)
    blksize = (int)conn->data->set.tftp_blksize;
  need_blksize = blksize;
  if(need_blksize < TFTP_BLKSIZE_DEFAULT)
    need_blksize = TFTP_BLKSIZE_DEFAULT;
  state->blksize = blksize;
  return CURLE_OK;
}
";
    let vulnerable = FunctionBuilder::new("tftp_connect", "curl-7.65.3", file)
        .base(0x41a0)
        .block(
            "1",
            &["2", "8"],
            &[
                ("push rbp", 2),
                ("mov rbp, rsp", 2),
                ("sub rsp, 0x20", 2),
                ("mov dword ptr [rbp - 0x14], 0x200", 4),
                ("mov edi, 1", 5),
                ("mov esi, 0x150", 5),
                ("call 0x4030", 5),
                ("mov qword ptr [rbp - 0x8], rax", 5),
                ("cmp qword ptr [rbp - 0x8], 0", 6),
                ("je 0x4240", 6),
            ],
        )
        .block(
            "2",
            &["7"],
            &[
                ("mov rax, qword ptr [rdi]", 8),
                ("mov rax, qword ptr [rax + 0x4c8]", 8),
                ("test rax, rax", 8),
                ("je 0x4200", 8),
                ("mov dword ptr [rbp - 0x14], eax", 9),
            ],
        )
        .block(
            "7",
            &[],
            &[
                ("mov ecx, dword ptr [rbp - 0x14]", 10),
                ("mov rdx, qword ptr [rbp - 0x8]", 10),
                ("mov dword ptr [rdx + 0x28], ecx", 10),
                ("xor eax, eax", 11),
                ("leave", 11),
                ("ret", 11),
            ],
        )
        .block("8", &[], &[("mov eax, 0x1b", 7), ("leave", 7), ("ret", 7)])
        .build()
        .expect("valid fixture");
    let patched = FunctionBuilder::new("tftp_connect", "curl-7.66.0", file)
        .base(0x41a0)
        .block(
            "1",
            &["2", "8"],
            &[
                ("push rbp", 2),
                ("mov rbp, rsp", 2),
                ("sub rsp, 0x20", 2),
                ("mov dword ptr [rbp - 0x14], 0x200", 4),
                ("mov edi, 1", 5),
                ("mov esi, 0x150", 5),
                ("call 0x4030", 5),
                ("mov qword ptr [rbx + 0x2a8], rax", 5),
                ("mov qword ptr [rbp - 0x8], rax", 5),
                ("cmp qword ptr [rbp - 0x8], 0", 6),
                ("je 0x4270", 6),
            ],
        )
        .block(
            "2",
            &["3"],
            &[
                ("mov rax, qword ptr [rdi]", 8),
                ("mov rax, qword ptr [rax + 0x4c8]", 8),
                ("test rax, rax", 8),
                ("je 0x4200", 8),
                ("mov dword ptr [rbp - 0x14], eax", 9),
            ],
        )
        .block(
            "3",
            &["6", "4"],
            &[
                ("mov eax, dword ptr [rbp - 0x14]", 10),
                ("mov dword ptr [rbp - 0x18], eax", 10),
                ("cmp dword ptr [rbp - 0x18], 0x1ff", 11),
                ("jg 0x4230", 11),
            ],
        )
        .block("6", &["4"], &[("mov dword ptr [rbp - 0x18], 0x200", 12)])
        .block(
            "4",
            &["5"],
            &[("mov edx, dword ptr [rbp - 0x14]", 13), ("mov rsi, qword ptr [rbp - 0x8]", 13)],
        )
        .block("5", &["7"], &[("mov dword ptr [rsi + 0x28], edx", 13)])
        .block("7", &[], &[("xor eax, eax", 14), ("leave", 14), ("ret", 14)])
        .block("8", &[], &[("mov eax, 0x1b", 7), ("leave", 7), ("ret", 7)])
        .build()
        .expect("valid fixture");
    Scenario {
        vulnerable,
        patched,
        old_src: old_src.into(),
        new_src: new_src.into(),
        source_file: file.into(),
    }
}
