//! Corpus loading, section extraction, and content variants.
//!
//! A corpus directory holds `manifest.json`, `papers/<paper_id>.md` and
//! optionally `images/<paper_id>.jpg`. Every markdown file is pinned by a
//! SHA-256 checksum in the manifest.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::sha256_hex;

pub mod synthetic;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("no manifest found at {0}")]
    MissingManifest(PathBuf),
    #[error("manifest is not valid: {0}")]
    InvalidManifest(String),
    #[error("paper {paper_id}: file {path} does not exist")]
    MissingFile { paper_id: String, path: PathBuf },
    #[error("checksum mismatch for paper {0}")]
    ChecksumMismatch(String),
    #[error("duplicate paper id {0}")]
    DuplicatePaperId(String),
    #[error("paper {0} has an empty body")]
    EmptyBody(String),
    #[error("paper id must not be empty")]
    EmptyPaperId,
    #[error("paper {0} is not valid UTF-8")]
    InvalidUtf8(String),
    #[error("missing section: {0}")]
    MissingSection(SectionKind),
    #[error("section {0} cannot be an injection target")]
    InvalidInjectionTarget(SectionKind),
    #[error("format status of paper {0} is already set")]
    FormatAlreadySet(String),
    #[error("unknown paper {0}")]
    UnknownPaper(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SectionKind {
    Title,
    Abstract,
    Introduction,
    RelatedWork,
    BodyOther,
    Conclusion,
    References,
}

impl SectionKind {
    pub const ALL: [SectionKind; 7] = [
        SectionKind::Title,
        SectionKind::Abstract,
        SectionKind::Introduction,
        SectionKind::RelatedWork,
        SectionKind::BodyOther,
        SectionKind::Conclusion,
        SectionKind::References,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SectionKind::Title => "title",
            SectionKind::Abstract => "abstract",
            SectionKind::Introduction => "introduction",
            SectionKind::RelatedWork => "related_work",
            SectionKind::BodyOther => "body_other",
            SectionKind::Conclusion => "conclusion",
            SectionKind::References => "references",
        }
    }

    /// Sections that count as paper body for the text-only format gate.
    pub fn is_body(self) -> bool {
        matches!(
            self,
            SectionKind::Introduction
                | SectionKind::RelatedWork
                | SectionKind::BodyOther
                | SectionKind::Conclusion
        )
    }
}

impl fmt::Display for SectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One extracted section. `start..end` is the byte span of the section in
/// the source markdown (heading line included); `body_start` is where the
/// heading line ends.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub kind: SectionKind,
    /// Heading text without the `#` markers; empty for derived sections.
    pub heading: String,
    /// Raw heading line as it appeared in the source.
    pub heading_line: String,
    pub body: String,
    pub start: usize,
    pub body_start: usize,
    pub end: usize,
}

impl Section {
    /// Text used for chunking: heading and body, whichever are present.
    pub fn text(&self) -> String {
        match (self.heading.is_empty(), self.body.is_empty()) {
            (true, _) => self.body.clone(),
            (false, true) => self.heading.clone(),
            (false, false) => format!("{}\n{}", self.heading, self.body),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SectionMap(pub Vec<Section>);

impl SectionMap {
    pub fn iter(&self) -> std::slice::Iter<'_, Section> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn first(&self, kind: SectionKind) -> Option<&Section> {
        self.0.iter().find(|s| s.kind == kind)
    }

    pub fn has(&self, kind: SectionKind) -> bool {
        self.first(kind).is_some()
    }

    pub fn kinds(&self) -> Vec<SectionKind> {
        self.0.iter().map(|s| s.kind).collect()
    }

    /// Headings and bodies in order, for comparison with the source up to
    /// whitespace normalization.
    pub fn rebuild(&self) -> String {
        let mut out = String::new();
        for s in &self.0 {
            if !s.heading_line.is_empty() {
                out.push_str(&s.heading_line);
                out.push('\n');
            }
            out.push_str(&s.body);
            out.push('\n');
        }
        out
    }
}

/// Collapses every whitespace run to a single space and trims.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    TitleOnly,
    TitleAbstract,
    TitleAbstractIntro,
    TitleConclusion,
    Full,
}

impl VariantKind {
    pub const ALL: [VariantKind; 5] = [
        VariantKind::TitleOnly,
        VariantKind::TitleAbstract,
        VariantKind::TitleAbstractIntro,
        VariantKind::TitleConclusion,
        VariantKind::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantKind::TitleOnly => "title_only",
            VariantKind::TitleAbstract => "title_abstract",
            VariantKind::TitleAbstractIntro => "title_abstract_intro",
            VariantKind::TitleConclusion => "title_conclusion",
            VariantKind::Full => "full",
        }
    }

    /// Sections kept by the variant, or `None` for the whole paper.
    pub fn required_sections(self) -> Option<&'static [SectionKind]> {
        match self {
            VariantKind::TitleOnly => Some(&[SectionKind::Title]),
            VariantKind::TitleAbstract => Some(&[SectionKind::Title, SectionKind::Abstract]),
            VariantKind::TitleAbstractIntro => Some(&[
                SectionKind::Title,
                SectionKind::Abstract,
                SectionKind::Introduction,
            ]),
            VariantKind::TitleConclusion => Some(&[SectionKind::Title, SectionKind::Conclusion]),
            VariantKind::Full => None,
        }
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaperRecord {
    pub paper_id: String,
    pub title: String,
    pub body_markdown: String,
    pub sections: SectionMap,
    pub first_page_image_path: Option<PathBuf>,
    format_ok: Option<bool>,
}

impl PaperRecord {
    /// Builds a record from markdown, extracting sections. The title comes
    /// from the title section, falling back to the paper id.
    pub fn new(paper_id: impl Into<String>, body_markdown: impl Into<String>) -> Result<Self, CorpusError> {
        let paper_id = paper_id.into();
        if paper_id.is_empty() {
            return Err(CorpusError::EmptyPaperId);
        }
        let body_markdown = body_markdown.into();
        let sections = extract_sections(&body_markdown);
        let title = sections
            .first(SectionKind::Title)
            .map(|s| s.heading.clone())
            .unwrap_or_else(|| paper_id.clone());
        Ok(Self {
            paper_id,
            title,
            body_markdown,
            sections,
            first_page_image_path: None,
            format_ok: None,
        })
    }

    pub fn with_image(mut self, path: impl Into<PathBuf>) -> Self {
        self.first_page_image_path = Some(path.into());
        self
    }

    pub fn format_ok(&self) -> Option<bool> {
        self.format_ok
    }

    pub fn set_format_ok(&mut self, ok: bool) -> Result<(), CorpusError> {
        if self.format_ok.is_some() {
            return Err(CorpusError::FormatAlreadySet(self.paper_id.clone()));
        }
        self.format_ok = Some(ok);
        Ok(())
    }

    pub fn section(&self, kind: SectionKind) -> Option<&Section> {
        self.sections.first(kind)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub corpus_id: String,
    papers: Vec<PaperRecord>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn from_records(
        corpus_id: impl Into<String>,
        papers: Vec<PaperRecord>,
    ) -> Result<Self, CorpusError> {
        let mut by_id = HashMap::with_capacity(papers.len());
        for (i, p) in papers.iter().enumerate() {
            if p.paper_id.is_empty() {
                return Err(CorpusError::EmptyPaperId);
            }
            if by_id.insert(p.paper_id.clone(), i).is_some() {
                return Err(CorpusError::DuplicatePaperId(p.paper_id.clone()));
            }
        }
        Ok(Self {
            corpus_id: corpus_id.into(),
            papers,
            by_id,
        })
    }

    pub fn papers(&self) -> &[PaperRecord] {
        &self.papers
    }

    pub fn len(&self) -> usize {
        self.papers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.papers.is_empty()
    }

    pub fn get(&self, paper_id: &str) -> Option<&PaperRecord> {
        self.by_id.get(paper_id).map(|&i| &self.papers[i])
    }

    pub fn ids(&self) -> Vec<String> {
        self.papers.iter().map(|p| p.paper_id.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub md: String,
    pub img: Option<String>,
    pub sha256_md: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub corpus_id: String,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn read(root: &Path) -> Result<Self, CorpusError> {
        let path = root.join(MANIFEST_FILE);
        if !path.is_file() {
            return Err(CorpusError::MissingManifest(path));
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| CorpusError::InvalidManifest(e.to_string()))
    }

    pub fn write(&self, root: &Path) -> Result<(), CorpusError> {
        let path = root.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| CorpusError::InvalidManifest(e.to_string()))?;
        text.push('\n');
        fs::write(&path, text).map_err(io_err(&path))
    }
}

/// Loads every manifest entry in manifest order, verifying checksums.
pub fn load_corpus(root: &Path) -> Result<Corpus, CorpusError> {
    let manifest = CorpusManifest::read(root)?;
    let mut seen = BTreeSet::new();
    let mut papers = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        if entry.id.is_empty() {
            return Err(CorpusError::EmptyPaperId);
        }
        if !seen.insert(entry.id.as_str()) {
            return Err(CorpusError::DuplicatePaperId(entry.id.clone()));
        }
        let md_path = root.join(&entry.md);
        if !md_path.is_file() {
            return Err(CorpusError::MissingFile {
                paper_id: entry.id.clone(),
                path: md_path,
            });
        }
        let bytes = fs::read(&md_path).map_err(io_err(&md_path))?;
        if !sha256_hex(&bytes).eq_ignore_ascii_case(&entry.sha256_md) {
            return Err(CorpusError::ChecksumMismatch(entry.id.clone()));
        }
        let body = String::from_utf8(bytes).map_err(|_| CorpusError::InvalidUtf8(entry.id.clone()))?;
        if body.trim().is_empty() {
            return Err(CorpusError::EmptyBody(entry.id.clone()));
        }
        let mut record = PaperRecord::new(entry.id.clone(), body)?;
        if let Some(img) = &entry.img {
            let img_path = root.join(img);
            if !img_path.is_file() {
                return Err(CorpusError::MissingFile {
                    paper_id: entry.id.clone(),
                    path: img_path,
                });
            }
            record = record.with_image(img_path);
        }
        papers.push(record);
    }
    Corpus::from_records(manifest.corpus_id, papers)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ManifestIssue {
    pub paper_id: Option<String>,
    pub message: String,
}

/// Checks a corpus directory against the manifest contract and reports
/// every problem found instead of stopping at the first.
pub fn validate_manifest(root: &Path) -> Vec<ManifestIssue> {
    let manifest = match CorpusManifest::read(root) {
        Ok(m) => m,
        Err(e) => {
            return vec![ManifestIssue {
                paper_id: None,
                message: e.to_string(),
            }]
        }
    };
    let mut issues = Vec::new();
    if manifest.corpus_id.trim().is_empty() {
        issues.push(ManifestIssue {
            paper_id: None,
            message: "corpus_id is empty".into(),
        });
    }
    let mut issue = |id: &str, message: String| {
        issues.push(ManifestIssue {
            paper_id: Some(id.to_string()),
            message,
        })
    };
    let mut seen = BTreeSet::new();
    for entry in &manifest.entries {
        if entry.id.is_empty() {
            issue("", "empty paper id".into());
            continue;
        }
        if !seen.insert(entry.id.clone()) {
            issue(&entry.id, "duplicate paper id".into());
        }
        let md_path = root.join(&entry.md);
        match fs::read(&md_path) {
            Ok(bytes) => {
                if !sha256_hex(&bytes).eq_ignore_ascii_case(&entry.sha256_md) {
                    issue(&entry.id, "checksum mismatch".into());
                }
                match std::str::from_utf8(&bytes) {
                    Ok(s) if s.trim().is_empty() => issue(&entry.id, "empty body".into()),
                    Ok(_) => {}
                    Err(_) => issue(&entry.id, "markdown is not valid UTF-8".into()),
                }
            }
            Err(_) => issue(&entry.id, format!("missing markdown file {}", entry.md)),
        }
        if let Some(img) = &entry.img {
            if !root.join(img).is_file() {
                issue(&entry.id, format!("missing image file {img}"));
            }
        }
    }
    issues
}

/// Source material for one paper when writing a corpus directory.
#[derive(Debug, Clone)]
pub struct PaperSource {
    pub paper_id: String,
    pub markdown: String,
    pub image: Option<Vec<u8>>,
}

/// Writes the canonical corpus layout and returns its manifest.
pub fn write_corpus(
    dest: &Path,
    corpus_id: &str,
    sources: &[PaperSource],
) -> Result<CorpusManifest, CorpusError> {
    let papers_dir = dest.join("papers");
    fs::create_dir_all(&papers_dir).map_err(io_err(&papers_dir))?;
    let mut entries = Vec::with_capacity(sources.len());
    let mut seen = BTreeSet::new();
    for src in sources {
        if src.paper_id.is_empty() {
            return Err(CorpusError::EmptyPaperId);
        }
        if !seen.insert(src.paper_id.as_str()) {
            return Err(CorpusError::DuplicatePaperId(src.paper_id.clone()));
        }
        let md_rel = format!("papers/{}.md", src.paper_id);
        let md_path = dest.join(&md_rel);
        fs::write(&md_path, src.markdown.as_bytes()).map_err(io_err(&md_path))?;
        let img = match &src.image {
            Some(bytes) => {
                let images_dir = dest.join("images");
                fs::create_dir_all(&images_dir).map_err(io_err(&images_dir))?;
                let rel = format!("images/{}.jpg", src.paper_id);
                let path = dest.join(&rel);
                fs::write(&path, bytes).map_err(io_err(&path))?;
                Some(rel)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            id: src.paper_id.clone(),
            md: md_rel,
            img,
            sha256_md: sha256_hex(src.markdown.as_bytes()),
        });
    }
    let manifest = CorpusManifest {
        corpus_id: corpus_id.to_string(),
        entries,
    };
    manifest.write(dest)?;
    Ok(manifest)
}

/// Turns a file stem into a paper id: lowercase ASCII alphanumerics with
/// single dashes.
pub fn slugify(stem: &str) -> String {
    let mut out = String::with_capacity(stem.len());
    let mut dash = false;
    for c in stem.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
            dash = false;
        } else if !dash && !out.is_empty() {
            out.push('-');
            dash = true;
        }
    }
    while out.ends_with('-') {
        out.pop();
    }
    out
}

/// Builds a corpus from a directory of already-extracted markdown files.
/// `<stem>.md` becomes paper `slugify(stem)`; a sibling `<stem>.jpg` is
/// copied as its first-page image.
pub fn ingest_markdown_dir(src: &Path, dest: &Path, corpus_id: &str) -> Result<CorpusManifest, CorpusError> {
    let mut md_files: Vec<PathBuf> = fs::read_dir(src)
        .map_err(io_err(src))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("md")))
        .collect();
    md_files.sort();
    let mut sources = Vec::with_capacity(md_files.len());
    for path in md_files {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let paper_id = slugify(stem);
        let markdown = fs::read_to_string(&path).map_err(io_err(&path))?;
        let jpg = path.with_extension("jpg");
        let image = if jpg.is_file() {
            Some(fs::read(&jpg).map_err(io_err(&jpg))?)
        } else {
            None
        };
        sources.push(PaperSource {
            paper_id,
            markdown,
            image,
        });
    }
    write_corpus(dest, corpus_id, &sources)
}

fn heading_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(#{1,6})[ \t]+(.*?)[ \t#]*$").unwrap())
}

fn named_section_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)^([0-9IVX]+[\.\s]|introduction|conclusion|related work|references)").unwrap()
    })
}

fn numbering_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^(?:[0-9]+(?:\.[0-9]+)*|[IVX]+)\.?\s*").unwrap())
}

fn is_abstract_heading(text: &str) -> bool {
    text.trim()
        .trim_end_matches([':', '.'])
        .trim()
        .eq_ignore_ascii_case("abstract")
}

/// Maps a heading matching the named-section pattern to its kind.
fn named_kind(text: &str) -> Option<SectionKind> {
    if !named_section_re().is_match(text.trim()) {
        return None;
    }
    let name = numbering_re().replace(text.trim(), "").to_lowercase();
    let kind = if name.starts_with("introduction") {
        SectionKind::Introduction
    } else if name.starts_with("related work") {
        SectionKind::RelatedWork
    } else if name.starts_with("conclusion") {
        SectionKind::Conclusion
    } else if name.starts_with("references") {
        SectionKind::References
    } else {
        SectionKind::BodyOther
    };
    Some(kind)
}

struct RawSegment {
    heading: Option<(usize, String, String)>,
    start: usize,
    body_start: usize,
    end: usize,
}

fn split_segments(text: &str) -> Vec<RawSegment> {
    let mut segs = vec![RawSegment {
        heading: None,
        start: 0,
        body_start: 0,
        end: text.len(),
    }];
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let content = line.trim_end_matches(['\n', '\r']);
        if let Some(caps) = heading_re().captures(content) {
            segs.last_mut().unwrap().end = offset;
            segs.push(RawSegment {
                heading: Some((caps[1].len(), caps[2].to_string(), content.to_string())),
                start: offset,
                body_start: offset + line.len(),
                end: text.len(),
            });
        }
        offset += line.len();
    }
    segs
}

/// Splits the first paragraph off `start..end`. Returns the byte offset where
/// the paragraph starts and where the rest begins, or `None` if the range is
/// blank.
fn first_paragraph(text: &str, start: usize, end: usize) -> Option<(usize, usize)> {
    let region = &text[start..end];
    let lead = region.len() - region.trim_start().len();
    if lead == region.len() {
        return None;
    }
    let para_start = start + lead;
    let rest = &text[para_start..end];
    let mut cut = end;
    let mut pos = 0;
    for line in rest.split_inclusive('\n') {
        if pos > 0 && line.trim().is_empty() {
            cut = para_start + pos;
            break;
        }
        pos += line.len();
    }
    // Swallow the blank lines that follow so the rest starts at content.
    let tail = &text[cut..end];
    let skip = tail.len() - tail.trim_start().len();
    Some((para_start, cut + skip))
}

/// Splits markdown into typed sections using the heading heuristic.
///
/// The first heading is the title when it is level 1 and does not name a
/// standard section. Without an explicit "Abstract" heading, the first
/// paragraph after the title (or before any heading, if there is no title)
/// becomes the abstract. Numbered and standard-named headings map to their
/// kinds; everything else is `body_other`. Text with no headings becomes a
/// single `body_other` section.
pub fn extract_sections(text: &str) -> SectionMap {
    if text.trim().is_empty() {
        return SectionMap::default();
    }
    let segs = split_segments(text);
    if segs.len() == 1 {
        return SectionMap(vec![make_section(text, SectionKind::BodyOther, None, 0, 0, text.len())]);
    }

    let has_abstract_heading = segs
        .iter()
        .filter_map(|s| s.heading.as_ref())
        .any(|(_, h, _)| is_abstract_heading(h));
    let title_idx = segs.iter().position(|s| s.heading.is_some()).filter(|&i| {
        let (level, h, _) = segs[i].heading.as_ref().unwrap();
        *level == 1 && !is_abstract_heading(h) && named_kind(h).is_none()
    });

    let mut out = Vec::new();
    let mut have_abstract = false;
    let mut have_conclusion = false;
    for (i, seg) in segs.iter().enumerate() {
        let heading = seg.heading.as_ref().map(|(_, h, line)| (h.as_str(), line.as_str()));
        match heading {
            None => {
                // Preamble before the first heading.
                if text[seg.start..seg.end].trim().is_empty() {
                    continue;
                }
                if title_idx.is_none() && !has_abstract_heading {
                    split_region(text, seg.start, seg.end, &mut out, &mut have_abstract);
                } else {
                    out.push(make_section(text, SectionKind::BodyOther, None, seg.start, seg.start, seg.end));
                }
            }
            Some((h, line)) if Some(i) == title_idx => {
                if has_abstract_heading {
                    out.push(make_section(text, SectionKind::Title, Some((h, line)), seg.start, seg.body_start, seg.end));
                } else {
                    match first_paragraph(text, seg.body_start, seg.end) {
                        Some((para_start, _)) => {
                            out.push(make_section(text, SectionKind::Title, Some((h, line)), seg.start, seg.body_start, para_start));
                            split_region(text, para_start, seg.end, &mut out, &mut have_abstract);
                        }
                        None => out.push(make_section(text, SectionKind::Title, Some((h, line)), seg.start, seg.body_start, seg.end)),
                    }
                }
            }
            Some((h, line)) => {
                let mut kind = if is_abstract_heading(h) {
                    SectionKind::Abstract
                } else {
                    named_kind(h).unwrap_or(SectionKind::BodyOther)
                };
                if kind == SectionKind::Abstract {
                    if have_abstract {
                        kind = SectionKind::BodyOther;
                    }
                    have_abstract = true;
                }
                if kind == SectionKind::Conclusion {
                    if have_conclusion {
                        kind = SectionKind::BodyOther;
                    }
                    have_conclusion = true;
                }
                out.push(make_section(text, kind, Some((h, line)), seg.start, seg.body_start, seg.end));
            }
        }
    }
    SectionMap(out)
}

/// Emits the first paragraph of `start..end` as the abstract and any
/// remainder as `body_other`.
fn split_region(text: &str, start: usize, end: usize, out: &mut Vec<Section>, have_abstract: &mut bool) {
    let Some((para_start, rest_start)) = first_paragraph(text, start, end) else {
        return;
    };
    if *have_abstract {
        out.push(make_section(text, SectionKind::BodyOther, None, start, start, end));
        return;
    }
    *have_abstract = true;
    out.push(make_section(text, SectionKind::Abstract, None, para_start, para_start, rest_start));
    if !text[rest_start..end].trim().is_empty() {
        out.push(make_section(text, SectionKind::BodyOther, None, rest_start, rest_start, end));
    }
}

fn make_section(
    text: &str,
    kind: SectionKind,
    heading: Option<(&str, &str)>,
    start: usize,
    body_start: usize,
    end: usize,
) -> Section {
    let (heading, heading_line) = heading
        .map(|(h, l)| (h.trim().to_string(), l.to_string()))
        .unwrap_or_default();
    Section {
        kind,
        heading,
        heading_line,
        body: text[body_start..end].trim().to_string(),
        start,
        body_start,
        end,
    }
}

/// Keeps only the sections named by the variant. The new record's id is
/// `{paper_id}#{variant_kind}`; `full` keeps the body byte-for-byte.
pub fn make_variant(paper: &PaperRecord, kind: VariantKind) -> Result<PaperRecord, CorpusError> {
    let id = format!("{}#{}", paper.paper_id, kind);
    let Some(required) = kind.required_sections() else {
        let mut rec = PaperRecord::new(id, paper.body_markdown.clone())?;
        rec.title = paper.title.clone();
        rec.first_page_image_path = paper.first_page_image_path.clone();
        return Ok(rec);
    };
    for &k in required {
        if !paper.sections.has(k) {
            return Err(CorpusError::MissingSection(k));
        }
    }
    let src = &paper.body_markdown;
    let mut body = String::new();
    for &k in required {
        let s = paper.sections.first(k).expect("checked above");
        let slice = if k == SectionKind::Title {
            &src[s.start..s.body_start]
        } else {
            &src[s.start..s.end]
        };
        body.push_str(slice);
        if !body.ends_with('\n') {
            body.push('\n');
        }
    }
    let mut rec = PaperRecord::new(id, body)?;
    rec.title = paper.title.clone();
    Ok(rec)
}

/// Appends `sentence` to the end of each target section. Only abstract and
/// conclusion are valid targets. The returned record is `{paper_id}#injected`.
pub fn inject_sentence(
    paper: &PaperRecord,
    sentence: &str,
    targets: &BTreeSet<SectionKind>,
) -> Result<PaperRecord, CorpusError> {
    for &t in targets {
        if !matches!(t, SectionKind::Abstract | SectionKind::Conclusion) {
            return Err(CorpusError::InvalidInjectionTarget(t));
        }
        if !paper.sections.has(t) {
            return Err(CorpusError::MissingSection(t));
        }
    }
    let sentence = sentence.trim();
    let mut body = paper.body_markdown.clone();
    if !sentence.is_empty() {
        let mut points: Vec<(usize, bool)> = targets
            .iter()
            .map(|&t| {
                let s = paper.sections.first(t).expect("checked above");
                let region = &paper.body_markdown[s.body_start..s.end];
                let trimmed = region.trim_end();
                (s.body_start + trimmed.len(), !trimmed.trim().is_empty())
            })
            .collect();
        points.sort_unstable_by_key(|p| std::cmp::Reverse(p.0));
        for (at, has_text) in points {
            let insert = if has_text {
                format!(" {sentence}")
            } else {
                sentence.to_string()
            };
            body.insert_str(at, &insert);
        }
    }
    let mut rec = PaperRecord::new(format!("{}#injected", paper.paper_id), body)?;
    rec.title = paper.title.clone();
    rec.first_page_image_path = paper.first_page_image_path.clone();
    Ok(rec)
}
