//! Deterministic synthetic papers for demos and tests.

use super::{Corpus, CorpusError, PaperRecord, PaperSource};

const TOPICS: [&str; 12] = [
    "Federated Edge Scheduling",
    "Byzantine Consensus Latency",
    "Wireless Spectrum Sensing",
    "Graph Neural Routing",
    "Sparse Sensor Calibration",
    "Energy Aware Offloading",
    "Secure Model Aggregation",
    "Mobile Crowd Sensing",
    "Vehicular Network Caching",
    "Privacy Preserving Localization",
    "Adaptive Beam Selection",
    "Drone Swarm Coordination",
];

const WORDS: [&str; 24] = [
    "latency", "throughput", "robust", "protocol", "channel", "gradient", "energy", "privacy",
    "scheduler", "topology", "sensor", "baseline", "dataset", "convergence", "fairness", "budget",
    "adversary", "bandwidth", "cluster", "simulation", "accuracy", "overhead", "deployment", "model",
];

pub fn paper_id(i: usize) -> String {
    format!("p{i:03}")
}

/// Titles are unique and none is a quoted substring of another.
pub fn title(i: usize) -> String {
    format!("{} Study {:03}", TOPICS[i % TOPICS.len()], i)
}

fn sentence(i: usize, salt: usize, len: usize) -> String {
    let mut words: Vec<&str> = (0..len)
        .map(|k| WORDS[(i * 7 + salt * 13 + k * 5 + k * k) % WORDS.len()])
        .collect();
    let mut first = words.remove(0).to_string();
    first[..1].make_ascii_uppercase();
    format!("{first} {}.", words.join(" "))
}

fn paragraph(i: usize, salt: usize, sentences: usize) -> String {
    (0..sentences)
        .map(|s| sentence(i, salt * 31 + s, 8 + (i + s) % 5))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Markdown for synthetic paper `i`: title, abstract paragraph, numbered
/// introduction, related work, method, experiments, conclusion, references.
pub fn markdown(i: usize) -> String {
    format!(
        "# {title}\n\n{abs}\n\n# 1 Introduction\n{intro}\n\n{intro2}\n\n# 2 Related Work\n{rw}\n\n# 3 Method\n{method}\n\n# 4 Experiments\n{exp}\n\n# 5 Conclusion\n{concl}\n\n# References\n[1] A. Author. Prior work {i}. 2023.\n",
        title = title(i),
        abs = paragraph(i, 1, 3),
        intro = paragraph(i, 2, 4),
        intro2 = paragraph(i, 3, 3),
        rw = paragraph(i, 4, 3),
        method = paragraph(i, 5, 5),
        exp = paragraph(i, 6, 4),
        concl = paragraph(i, 7, 2),
    )
}

pub fn sources(n: usize) -> Vec<PaperSource> {
    (0..n)
        .map(|i| PaperSource {
            paper_id: paper_id(i),
            markdown: markdown(i),
            image: None,
        })
        .collect()
}

pub fn corpus(n: usize) -> Result<Corpus, CorpusError> {
    let papers = (0..n)
        .map(|i| PaperRecord::new(paper_id(i), markdown(i)))
        .collect::<Result<Vec<_>, _>>()?;
    Corpus::from_records(format!("synthetic-{n}"), papers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SectionKind;

    #[test]
    fn synthetic_papers_have_all_sections() {
        let c = corpus(12).unwrap();
        for p in c.papers() {
            for k in [
                SectionKind::Title,
                SectionKind::Abstract,
                SectionKind::Introduction,
                SectionKind::RelatedWork,
                SectionKind::Conclusion,
                SectionKind::References,
            ] {
                assert!(p.sections.has(k), "{} lacks {k}", p.paper_id);
            }
            assert_eq!(p.title, title(c.ids().iter().position(|x| x == &p.paper_id).unwrap()));
        }
    }

    #[test]
    fn titles_are_not_nested() {
        let titles: Vec<String> = (0..300).map(title).collect();
        for (i, a) in titles.iter().enumerate() {
            for (j, b) in titles.iter().enumerate() {
                if i != j {
                    assert!(!format!("'{b}'").contains(&format!("'{a}'")));
                }
            }
        }
    }
}
