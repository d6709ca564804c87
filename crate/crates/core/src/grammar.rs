//! BNF grammars over the DMM design space and the genotype-to-phenotype
//! mapping of grammatical evolution.
//!
//! Grammar text has one rule per `::=`; productions are separated by `|` and
//! symbols by whitespace, with `<...>` marking nonterminals. Lines without
//! `::=` continue the previous rule, and lines starting with `#` are
//! comments. Tokens before the `<lhs>` (such as rule labels) are ignored.

use std::collections::HashMap;
use std::fmt;
use std::ops::RangeInclusive;

use rand::Rng;
use thiserror::Error;

use crate::heap_sim::{
    AllocationMechanism, AllocationPolicy, AllocatorClass, AllocatorSpec, DataStructureKind, DmmSpec,
};
use crate::trace::ProfilingReport;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GrammarError {
    #[error("line {line}: {reason}")]
    SyntaxError { line: usize, reason: String },
    #[error("nonterminal <{0}> is referenced but never defined")]
    UndefinedNonterminal(String),
    #[error("the trace has no allocations")]
    EmptyTrace,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Symbol {
    /// Index of the defining rule.
    NonTerminal(usize),
    Terminal(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rule {
    pub lhs: String,
    pub productions: Vec<Vec<Symbol>>,
}

impl Rule {
    /// Whether expanding this rule reads a codon. A rule whose only
    /// production is a sequence of several symbols is a pure concatenation
    /// and is expanded without reading one; every other rule, including a
    /// single-production rule with one symbol, consumes a codon.
    pub fn consumes_codon(&self) -> bool {
        !(self.productions.len() == 1 && self.productions[0].len() > 1)
    }
}

/// A context-free grammar. Rule order and production order are significant:
/// production indices drive decoding. The start symbol is the first rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grammar {
    rules: Vec<Rule>,
}

impl Grammar {
    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn start(&self) -> &str {
        &self.rules[0].lhs
    }

    pub fn rule(&self, name: &str) -> Option<&Rule> {
        self.rules.iter().find(|r| r.lhs == name)
    }

    /// Largest production count of any rule: the exclusive codon bound.
    pub fn codon_domain(&self) -> u32 {
        self.rules.iter().map(|r| r.productions.len()).max().unwrap_or(1) as u32
    }

    pub fn nonterminals(&self) -> impl Iterator<Item = &str> {
        self.rules.iter().map(|r| r.lhs.as_str())
    }

    pub fn terminals(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for sym in self.rules.iter().flat_map(|r| r.productions.iter().flatten()) {
            if let Symbol::Terminal(t) = sym {
                if !seen.contains(&t.as_str()) {
                    seen.push(t.as_str());
                }
            }
        }
        seen
    }
}

impl fmt::Display for Grammar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for rule in &self.rules {
            write!(f, "<{}> ::=", rule.lhs)?;
            for (i, production) in rule.productions.iter().enumerate() {
                if i > 0 {
                    f.write_str(" |")?;
                }
                for sym in production {
                    match sym {
                        Symbol::NonTerminal(idx) => write!(f, " <{}>", self.rules[*idx].lhs)?,
                        Symbol::Terminal(t) => write!(f, " {t}")?,
                    }
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

pub fn parse_bnf(text: &str) -> Result<Grammar, GrammarError> {
    // (line of definition, lhs, right-hand-side text)
    let mut raw: Vec<(usize, String, String)> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        match trimmed.split_once("::=") {
            Some((head, body)) => {
                let lhs = head
                    .split_whitespace()
                    .last()
                    .and_then(|tok| tok.strip_prefix('<')?.strip_suffix('>'))
                    .filter(|name| !name.is_empty() && !name.contains(['<', '>']))
                    .ok_or_else(|| GrammarError::SyntaxError {
                        line: lineno,
                        reason: "expected `<Nonterminal> ::=`".into(),
                    })?;
                if raw.iter().any(|(_, l, _)| l == lhs) {
                    return Err(GrammarError::SyntaxError {
                        line: lineno,
                        reason: format!("<{lhs}> is defined twice"),
                    });
                }
                raw.push((lineno, lhs.to_string(), body.to_string()));
            }
            None => match raw.last_mut() {
                Some((_, _, body)) => {
                    body.push(' ');
                    body.push_str(trimmed);
                }
                None => {
                    return Err(GrammarError::SyntaxError {
                        line: lineno,
                        reason: "text before the first rule".into(),
                    })
                }
            },
        }
    }
    if raw.is_empty() {
        return Err(GrammarError::SyntaxError { line: 1, reason: "no rules".into() });
    }

    let index: HashMap<&str, usize> = raw.iter().enumerate().map(|(i, (_, l, _))| (l.as_str(), i)).collect();
    let mut rules = Vec::with_capacity(raw.len());
    for (lineno, lhs, body) in &raw {
        let mut productions = Vec::new();
        for alt in body.split('|') {
            let mut production = Vec::new();
            for tok in alt.split_whitespace() {
                if let Some(name) = tok.strip_prefix('<') {
                    let name = name.strip_suffix('>').ok_or_else(|| GrammarError::SyntaxError {
                        line: *lineno,
                        reason: format!("unterminated nonterminal {tok}"),
                    })?;
                    let target = index
                        .get(name)
                        .ok_or_else(|| GrammarError::UndefinedNonterminal(name.to_string()))?;
                    production.push(Symbol::NonTerminal(*target));
                } else if tok.contains(['<', '>']) {
                    return Err(GrammarError::SyntaxError {
                        line: *lineno,
                        reason: format!("stray angle bracket in {tok}"),
                    });
                } else {
                    production.push(Symbol::Terminal(tok.to_string()));
                }
            }
            if production.is_empty() {
                return Err(GrammarError::SyntaxError {
                    line: *lineno,
                    reason: format!("empty production in <{lhs}>"),
                });
            }
            productions.push(production);
        }
        rules.push(Rule { lhs: lhs.clone(), productions });
    }
    Ok(Grammar { rules })
}

/// Builds the DMM grammar for a trace. `<Size>` lists every distinct size
/// except the largest, which becomes `<MaxSize>`. A trace with a single
/// distinct size uses it for both.
pub fn generate_grammar(report: &ProfilingReport) -> Result<Grammar, GrammarError> {
    grammar_for_sizes(report.distinct_sizes())
}

/// [`generate_grammar`] from an ascending list of distinct sizes.
pub fn grammar_for_sizes(sizes: &[u64]) -> Result<Grammar, GrammarError> {
    let (&max, rest) = sizes.split_last().ok_or(GrammarError::EmptyTrace)?;
    let small: Vec<String> = if rest.is_empty() {
        vec![max.to_string()]
    } else {
        rest.iter().map(u64::to_string).collect()
    };
    let alts = |items: &mut dyn Iterator<Item = &str>| items.collect::<Vec<_>>().join(" | ");
    let fields = "<AllocatorClass> <AllowSplitting> <AllowCoalescing>";
    let tail = "<DataStructure> <AllocationMechanism> <AllocationPolicy>";
    let text = format!(
        "<DynamicMemoryManager> ::= <Allocators>\n\
         <Allocators> ::= <AllocatorMaxSize> | <AllocatorSize>\n\
         <AllocatorSize> ::= {fields} <Size> {tail} <Allocators>\n\
         <AllocatorMaxSize> ::= {fields} <MaxSize> {tail}\n\
         <AllocatorClass> ::= {classes}\n\
         <Size> ::= {small}\n\
         <MaxSize> ::= {max}\n\
         <AllowSplitting> ::= true | false\n\
         <AllowCoalescing> ::= true | false\n\
         <DataStructure> ::= {ds}\n\
         <AllocationMechanism> ::= {mech}\n\
         <AllocationPolicy> ::= {policy}\n",
        classes = alts(&mut AllocatorClass::ALL.iter().map(|c| c.as_str())),
        small = small.join(" | "),
        ds = alts(&mut DataStructureKind::ALL.iter().map(|c| c.as_str())),
        mech = alts(&mut AllocationMechanism::ALL.iter().map(|c| c.as_str())),
        policy = alts(&mut AllocationPolicy::ALL.iter().map(|c| c.as_str())),
    );
    parse_bnf(&text)
}

/// A variable-length integer genome.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Genome {
    pub codons: Vec<u32>,
}

impl Genome {
    pub fn new(codons: Vec<u32>) -> Self {
        Self { codons }
    }

    pub fn len(&self) -> usize {
        self.codons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codons.is_empty()
    }
}

/// Uniform-length genome with uniform codons in `[0, codon_domain)`.
pub fn random_genome(rng: &mut impl Rng, length: RangeInclusive<usize>, codon_domain: u32) -> Genome {
    let len = rng.random_range(length);
    Genome::new((0..len).map(|_| rng.random_range(0..codon_domain.max(1))).collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InvalidReason {
    EmptyGenome,
    /// Nonterminals remained after the wrap limit.
    WrapLimit,
    /// The derived terminals do not describe a DMM.
    Malformed(String),
    /// Two allocators share an upper bound.
    DuplicateUpperBound(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecodeOutcome {
    Valid { spec: DmmSpec, codons_consumed: usize, wraps_used: usize },
    Invalid(InvalidReason),
}

impl DecodeOutcome {
    pub fn spec(&self) -> Option<&DmmSpec> {
        match self {
            DecodeOutcome::Valid { spec, .. } => Some(spec),
            DecodeOutcome::Invalid(_) => None,
        }
    }
}

/// Leftmost derivation of the start symbol driven by `genome`. Each codon
/// picks production `codon mod production_count`; reading wraps to the first
/// codon at most `max_wraps` times.
pub fn decode(genome: &Genome, grammar: &Grammar, max_wraps: usize) -> DecodeOutcome {
    match derive(genome, grammar, max_wraps) {
        Ok((terminals, codons_consumed, wraps_used)) => match assemble(&terminals) {
            Ok(spec) => DecodeOutcome::Valid { spec, codons_consumed, wraps_used },
            Err(reason) => DecodeOutcome::Invalid(reason),
        },
        Err(reason) => DecodeOutcome::Invalid(reason),
    }
}

fn derive<'g>(
    genome: &Genome,
    grammar: &'g Grammar,
    max_wraps: usize,
) -> Result<(Vec<&'g str>, usize, usize), InvalidReason> {
    if genome.is_empty() {
        return Err(InvalidReason::EmptyGenome);
    }
    // Pending symbols, rightmost at the bottom: rule indices or terminals.
    let mut stack: Vec<Result<usize, &'g str>> = vec![Ok(0)];
    let mut terminals = Vec::new();
    let (mut read, mut wraps, mut cursor) = (0usize, 0usize, 0usize);

    while let Some(item) = stack.pop() {
        let rule = match item {
            Err(t) => {
                terminals.push(t);
                continue;
            }
            Ok(idx) => &grammar.rules[idx],
        };
        let choice = if rule.consumes_codon() {
            if cursor == genome.len() {
                if wraps == max_wraps {
                    return Err(InvalidReason::WrapLimit);
                }
                wraps += 1;
                cursor = 0;
            }
            let codon = genome.codons[cursor] as usize;
            cursor += 1;
            read += 1;
            codon % rule.productions.len()
        } else {
            0
        };
        stack.extend(rule.productions[choice].iter().rev().map(|sym| match sym {
            Symbol::NonTerminal(idx) => Ok(*idx),
            Symbol::Terminal(t) => Err(t.as_str()),
        }));
    }
    Ok((terminals, read, wraps))
}

/// Turns a terminal string into a DMM: seven terminals per allocator, sorted
/// by upper bound.
fn assemble(terminals: &[&str]) -> Result<DmmSpec, InvalidReason> {
    if terminals.is_empty() || terminals.len() % 7 != 0 {
        return Err(InvalidReason::Malformed(format!("{} terminals", terminals.len())));
    }
    let bad = |what: &str, t: &str| InvalidReason::Malformed(format!("bad {what} {t:?}"));
    let flag = |t: &str| match t {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad("flag", t)),
    };
    let mut allocators = terminals
        .chunks_exact(7)
        .map(|c| {
            Ok(AllocatorSpec::new(
                AllocatorClass::from_terminal(c[0]).ok_or_else(|| bad("class", c[0]))?,
                flag(c[1])?,
                flag(c[2])?,
                c[3].parse().ok().filter(|&s: &u64| s > 0).ok_or_else(|| bad("size", c[3]))?,
                DataStructureKind::from_terminal(c[4]).ok_or_else(|| bad("data structure", c[4]))?,
                AllocationMechanism::from_terminal(c[5]).ok_or_else(|| bad("mechanism", c[5]))?,
                AllocationPolicy::from_terminal(c[6]).ok_or_else(|| bad("policy", c[6]))?,
            ))
        })
        .collect::<Result<Vec<_>, InvalidReason>>()?;
    allocators.sort_by_key(|a| a.upper_bound);
    if let Some(w) = allocators.windows(2).find(|w| w[0].upper_bound == w[1].upper_bound) {
        return Err(InvalidReason::DuplicateUpperBound(w[0].upper_bound));
    }
    Ok(DmmSpec::new(allocators))
}
