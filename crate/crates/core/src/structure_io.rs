//! Fixed-column PDB parsing.
//!
//! Only `ATOM` records of the first model are read. Hydrogens, `HETATM`
//! records, unknown (`UNK`) residues and alternate locations other than blank
//! or `A` are dropped.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PdbError {
    #[error("no protein atoms found")]
    NoProteinAtoms,
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

const ELEMENTS: [&str; 92] = [
    "H", "HE", "LI", "BE", "B", "C", "N", "O", "F", "NE", "NA", "MG", "AL", "SI", "P", "S", "CL",
    "AR", "K", "CA", "SC", "TI", "V", "CR", "MN", "FE", "CO", "NI", "CU", "ZN", "GA", "GE", "AS",
    "SE", "BR", "KR", "RB", "SR", "Y", "ZR", "NB", "MO", "TC", "RU", "RH", "PD", "AG", "CD", "IN",
    "SN", "SB", "TE", "I", "XE", "CS", "BA", "LA", "CE", "PR", "ND", "PM", "SM", "EU", "GD", "TB",
    "DY", "HO", "ER", "TM", "YB", "LU", "HF", "TA", "W", "RE", "OS", "IR", "PT", "AU", "HG", "TL",
    "PB", "BI", "PO", "AT", "RN", "FR", "RA", "AC", "TH", "PA", "U",
];

pub const STANDARD_RESIDUES: [&str; 20] = [
    "ALA", "ARG", "ASN", "ASP", "CYS", "GLN", "GLU", "GLY", "HIS", "ILE", "LEU", "LYS", "MET",
    "PHE", "PRO", "SER", "THR", "TRP", "TYR", "VAL",
];

/// Atomic number for an element symbol (case-insensitive), e.g. `"Fe"` → 26.
pub fn atomic_number(symbol: &str) -> Option<u32> {
    let s = symbol.trim().to_ascii_uppercase();
    ELEMENTS.iter().position(|e| *e == s).map(|i| i as u32 + 1)
}

/// Guesses the element from a PDB atom-name field (columns 13–16).
///
/// Two-letter elements are left-justified in column 13; one-letter elements
/// start in column 14.
fn element_from_name(name_field: &str) -> Option<u32> {
    let trimmed = name_field.trim();
    // A name starting in column 13 with at most two letters ("FE", "ZN")
    // is a two-letter element; anything longer ("HG21") starts with a
    // one-letter symbol.
    if name_field.starts_with(|c: char| c.is_ascii_alphabetic())
        && trimmed.len() <= 2
        && trimmed.chars().all(|c| c.is_ascii_alphabetic())
    {
        if let Some(z) = atomic_number(trimmed) {
            return Some(z);
        }
    }
    trimmed
        .chars()
        .find(|c| c.is_ascii_alphabetic())
        .and_then(|c| atomic_number(&c.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub name: String,
    pub element_number: u32,
    pub position: [f64; 3],
    pub is_backbone: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Residue {
    pub name: String,
    pub seq_id: i32,
    pub insertion_code: char,
    pub atoms: Vec<Atom>,
}

impl Residue {
    /// One of the 20 amino acids with N, CA and C all present.
    pub fn is_standard(&self) -> bool {
        STANDARD_RESIDUES.contains(&self.name.as_str()) && self.has_complete_backbone()
    }

    pub fn atom(&self, name: &str) -> Option<&Atom> {
        self.atoms.iter().find(|a| a.name == name)
    }

    /// `(N, CA, C)` positions when all three are present.
    pub fn backbone(&self) -> Option<[[f64; 3]; 3]> {
        Some([
            self.atom("N")?.position,
            self.atom("CA")?.position,
            self.atom("C")?.position,
        ])
    }

    pub fn has_complete_backbone(&self) -> bool {
        self.backbone().is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub id: char,
    pub residues: Vec<Residue>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProteinStructure {
    pub chains: Vec<Chain>,
    pub source_id: String,
}

impl ProteinStructure {
    pub fn atoms(&self) -> impl Iterator<Item = &Atom> {
        self.chains
            .iter()
            .flat_map(|c| c.residues.iter())
            .flat_map(|r| r.atoms.iter())
    }

    pub fn atom_count(&self) -> usize {
        self.atoms().count()
    }

    pub fn residue_count(&self) -> usize {
        self.chains.iter().map(|c| c.residues.len()).sum()
    }

    pub fn chain(&self, id: char) -> Option<&Chain> {
        self.chains.iter().find(|c| c.id == id)
    }

    pub fn residue(&self, chain: char, seq_id: i32) -> Option<&Residue> {
        self.chain(chain)?.residues.iter().find(|r| r.seq_id == seq_id)
    }

    /// Axis-aligned bounds of all atom centers, or `None` if empty.
    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        let mut it = self.atoms();
        let first = it.next()?.position;
        let (mut lo, mut hi) = (first, first);
        for a in it {
            for k in 0..3 {
                lo[k] = lo[k].min(a.position[k]);
                hi[k] = hi[k].max(a.position[k]);
            }
        }
        Some((lo, hi))
    }

    /// Returns a copy with every atom shifted by `delta` Å.
    pub fn translated(&self, delta: [f64; 3]) -> ProteinStructure {
        let mut s = self.clone();
        for c in &mut s.chains {
            for r in &mut c.residues {
                for a in &mut r.atoms {
                    for k in 0..3 {
                        a.position[k] += delta[k];
                    }
                }
            }
        }
        s
    }
}

fn columns(line: &str, start: usize, end: usize) -> &str {
    // 1-based inclusive column range, clipped to the line.
    let bytes = line.as_bytes();
    let s = (start - 1).min(bytes.len());
    let e = end.min(bytes.len());
    line.get(s..e).unwrap_or("")
}

fn parse_coord(line: &str, lineno: usize, start: usize, end: usize) -> Result<f64, PdbError> {
    let field = columns(line, start, end).trim();
    field
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| PdbError::Malformed {
            line: lineno,
            msg: format!("bad coordinate field {field:?} in columns {start}-{end}"),
        })
}

/// Parses PDB text. `source_id` is stored verbatim.
pub fn parse_pdb(text: &str, source_id: &str) -> Result<ProteinStructure, PdbError> {
    let mut chains: Vec<Chain> = Vec::new();
    let mut chain_index: HashMap<char, usize> = HashMap::new();
    let mut residue_index: Vec<HashMap<(i32, char), usize>> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = if raw.len() > 80 { raw.get(..80).unwrap_or(raw) } else { raw };
        if line.starts_with("ENDMDL") {
            break;
        }
        if !line.starts_with("ATOM  ") {
            continue;
        }
        if line.len() < 54 {
            return Err(PdbError::Malformed {
                line: lineno,
                msg: format!("ATOM record has {} columns, need at least 54", line.len()),
            });
        }
        let altloc = columns(line, 17, 17).chars().next().unwrap_or(' ');
        if altloc != ' ' && altloc != 'A' {
            continue;
        }
        let res_name = columns(line, 18, 20).trim().to_string();
        if res_name == "UNK" {
            continue;
        }
        let name_field = columns(line, 13, 16);
        let name = name_field.trim().to_string();
        let element_field = columns(line, 77, 78).trim();
        let element = if element_field.is_empty() {
            element_from_name(name_field)
        } else {
            atomic_number(element_field).or_else(|| element_from_name(name_field))
        };
        let element_number = element.ok_or_else(|| PdbError::Malformed {
            line: lineno,
            msg: format!("cannot determine element for atom {name:?}"),
        })?;
        if element_number == 1 {
            continue;
        }
        let seq_field = columns(line, 23, 26).trim();
        let seq_id: i32 = seq_field.parse().map_err(|_| PdbError::Malformed {
            line: lineno,
            msg: format!("bad residue number {seq_field:?}"),
        })?;
        let icode = columns(line, 27, 27).chars().next().unwrap_or(' ');
        let chain_id = columns(line, 22, 22).chars().next().unwrap_or(' ');
        let position = [
            parse_coord(line, lineno, 31, 38)?,
            parse_coord(line, lineno, 39, 46)?,
            parse_coord(line, lineno, 47, 54)?,
        ];

        let ci = *chain_index.entry(chain_id).or_insert_with(|| {
            chains.push(Chain {
                id: chain_id,
                residues: Vec::new(),
            });
            residue_index.push(HashMap::new());
            chains.len() - 1
        });
        let chain = &mut chains[ci];
        let ri = *residue_index[ci].entry((seq_id, icode)).or_insert_with(|| {
            chain.residues.push(Residue {
                name: res_name.clone(),
                seq_id,
                insertion_code: icode,
                atoms: Vec::new(),
            });
            chain.residues.len() - 1
        });
        let is_backbone = matches!(name.as_str(), "N" | "CA" | "C");
        chain.residues[ri].atoms.push(Atom {
            name,
            element_number,
            position,
            is_backbone,
        });
    }

    for c in &mut chains {
        c.residues
            .sort_by_key(|r| (r.seq_id, r.insertion_code));
    }
    chains.retain(|c| !c.residues.is_empty());
    if chains.is_empty() {
        return Err(PdbError::NoProteinAtoms);
    }
    Ok(ProteinStructure {
        chains,
        source_id: source_id.to_string(),
    })
}

pub fn read_pdb(path: impl AsRef<Path>) -> Result<ProteinStructure, PdbError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| PdbError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_default();
    parse_pdb(&text, &id)
}

/// Backbone triples of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainBackbone {
    pub chain_id: char,
    /// `(N, CA, C)` positions, in residue order.
    pub triples: Vec<[[f64; 3]; 3]>,
    pub seq_ids: Vec<i32>,
    /// Residues in the chain before filtering.
    pub residue_count: usize,
}

/// Standard residues with complete N/CA/C backbones, per chain.
pub fn backbone_of(s: &ProteinStructure) -> Vec<ChainBackbone> {
    let out: Vec<ChainBackbone> = s
        .chains
        .iter()
        .map(|c| {
            let mut triples = Vec::new();
            let mut seq_ids = Vec::new();
            for r in c.residues.iter().filter(|r| r.is_standard()) {
                if let Some(t) = r.backbone() {
                    triples.push(t);
                    seq_ids.push(r.seq_id);
                }
            }
            log::debug!(
                "chain {}: {} of {} residues have a complete backbone",
                c.id,
                triples.len(),
                c.residues.len()
            );
            ChainBackbone {
                chain_id: c.id,
                triples,
                seq_ids,
                residue_count: c.residues.len(),
            }
        })
        .collect();
    if out.iter().all(|c| c.triples.is_empty()) {
        log::warn!("structure {} has no complete standard backbone residues", s.source_id);
    }
    out
}

/// Formats one ATOM record; used to build fixtures.
pub fn format_atom_record(
    serial: usize,
    atom_name: &str,
    res_name: &str,
    chain: char,
    seq_id: i32,
    pos: [f64; 3],
    element: &str,
) -> String {
    let name_field = if atom_name.len() >= 4 {
        atom_name.to_string()
    } else {
        format!(" {atom_name:<3}")
    };
    format!(
        "ATOM  {serial:>5} {name_field:<4} {res_name:>3} {chain}{seq_id:>4}    {:>8.3}{:>8.3}{:>8.3}{:>6.2}{:>6.2}          {element:>2}",
        pos[0], pos[1], pos[2], 1.0, 0.0
    )
}
