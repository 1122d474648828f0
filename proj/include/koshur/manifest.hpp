#pragma once
// Corpus manifests: TSV parsing with split/source validation and duration stats.
//
// Manifest format (UTF-8 TSV, one header line):
//   id	audio_path	text	speaker	source	split
// source is "rasa" (studio) or "ivr" (telephone); split is train/valid/test.
// Evaluation splits must be studio-sourced: valid/test entries with source
// "ivr" are rejected outright.

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "koshur/common.hpp"

namespace koshur::manifest {

struct BadManifest : Error {
    using Error::Error;
};
struct DuplicateId : Error {
    using Error::Error;
};
struct BadSplit : Error {
    using Error::Error;
};
struct NonRasaEval : Error {
    using Error::Error;
};
struct UnreadableAudio : Error {
    using Error::Error;
};

enum class Source { Rasa, Ivr };
enum class Split { Train, Valid, Test };

inline const char* to_string(Source s) { return s == Source::Rasa ? "rasa" : "ivr"; }

inline const char* to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Valid: return "valid";
        default: return "test";
    }
}

struct Entry {
    std::string id;
    std::string audio_path;
    std::string text;
    std::string speaker;
    Source source = Source::Rasa;
    Split split = Split::Train;
    int line = 0;  // 1-based line number in the source file
};

namespace detail {

inline std::string lower_ascii(std::string s) {
    for (char& c : s)
        if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    return s;
}

inline std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
        std::size_t tab = line.find('\t', start);
        if (tab == std::string::npos) {
            fields.push_back(line.substr(start));
            return fields;
        }
        fields.push_back(line.substr(start, tab - start));
        start = tab + 1;
    }
}

inline Source parse_source(const std::string& raw, int line) {
    std::string s = lower_ascii(raw);
    if (s == "rasa") return Source::Rasa;
    if (s == "ivr") return Source::Ivr;
    throw BadManifest("line " + std::to_string(line) + ": unknown source '" + raw + "'");
}

inline Split parse_split(const std::string& raw, int line) {
    std::string s = lower_ascii(raw);
    if (s == "train") return Split::Train;
    if (s == "valid") return Split::Valid;
    if (s == "test") return Split::Test;
    throw BadSplit("line " + std::to_string(line) + ": unknown split '" + raw + "'");
}

}  // namespace detail

inline const char* kManifestHeader = "id\taudio_path\ttext\tspeaker\tsource\tsplit";

// Parse manifest text. `origin` names the source in error messages.
inline std::vector<Entry> parse_manifest(const std::string& content, const std::string& origin = "manifest") {
    std::istringstream is(content);
    std::string line;
    if (!std::getline(is, line)) throw BadManifest(origin + ": empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kManifestHeader)
        throw BadManifest(origin + ": bad header (expected '" + std::string(kManifestHeader) + "')");

    std::vector<Entry> entries;
    std::map<std::string, int> seen;  // id -> first line number
    int line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> f = detail::split_tabs(line);
        if (f.size() != 6)
            throw BadManifest(origin + ": line " + std::to_string(line_no) + ": expected 6 fields, got " +
                              std::to_string(f.size()));
        Entry e;
        e.id = f[0];
        e.audio_path = f[1];
        e.text = f[2];
        e.speaker = f[3];
        e.source = detail::parse_source(f[4], line_no);
        e.split = detail::parse_split(f[5], line_no);
        e.line = line_no;
        if (e.id.empty()) throw BadManifest(origin + ": line " + std::to_string(line_no) + ": empty id");
        auto [it, fresh] = seen.emplace(e.id, line_no);
        if (!fresh)
            throw DuplicateId(origin + ": id '" + e.id + "' on lines " + std::to_string(it->second) + " and " +
                              std::to_string(line_no));
        if (e.split != Split::Train && e.source == Source::Ivr)
            throw NonRasaEval(origin + ": line " + std::to_string(line_no) + ": id '" + e.id +
                              "': telephone-sourced entry in evaluation split '" + to_string(e.split) + "'");
        entries.push_back(std::move(e));
    }
    return entries;
}

inline std::vector<Entry> load_manifest(const std::string& path) {
    return parse_manifest(read_text_file(path), path);
}

inline std::string format_manifest(const std::vector<Entry>& entries) {
    std::ostringstream os;
    os << kManifestHeader << "\n";
    for (const Entry& e : entries)
        os << e.id << '\t' << e.audio_path << '\t' << e.text << '\t' << e.speaker << '\t' << to_string(e.source)
           << '\t' << to_string(e.split) << "\n";
    return os.str();
}

inline void save_manifest(const std::string& path, const std::vector<Entry>& entries) {
    write_text_file(path, format_manifest(entries));
}

// Per-source, per-split duration/utterance table.
struct StatsCell {
    double hours = 0.0;
    int utterances = 0;
};

struct StatsTable {
    StatsCell cell[2][3];  // [source][split]
    StatsCell source_total[2];
    StatsCell split_total[3];
    StatsCell total;
};

// durations_s maps manifest id to clip length in seconds.
inline StatsTable manifest_stats(const std::vector<Entry>& entries, const std::map<std::string, double>& durations_s) {
    StatsTable t;
    for (const Entry& e : entries) {
        auto it = durations_s.find(e.id);
        if (it == durations_s.end()) throw UnreadableAudio("no duration for id '" + e.id + "'");
        double h = it->second / 3600.0;
        int si = static_cast<int>(e.source);
        int pi = static_cast<int>(e.split);
        t.cell[si][pi].hours += h;
        t.cell[si][pi].utterances += 1;
        t.source_total[si].hours += h;
        t.source_total[si].utterances += 1;
        t.split_total[pi].hours += h;
        t.split_total[pi].utterances += 1;
        t.total.hours += h;
        t.total.utterances += 1;
    }
    return t;
}

inline std::string format_stats(const StatsTable& t) {
    auto cell = [](const StatsCell& c) {
        std::ostringstream os;
        os.setf(std::ios::fixed);
        os.precision(2);
        os << c.hours << " h (" << c.utterances << ")";
        return os.str();
    };
    std::ostringstream os;
    auto row = [&](const std::string& label, const StatsCell* cells, const StatsCell& total) {
        os << label;
        for (int p = 0; p < 3; ++p) os << '\t' << cell(cells[p]);
        os << '\t' << cell(total) << "\n";
    };
    os << "source\ttrain\tvalid\ttest\ttotal\n";
    row("rasa", t.cell[0], t.source_total[0]);
    row("ivr", t.cell[1], t.source_total[1]);
    row("total", t.split_total, t.total);
    return os.str();
}

}  // namespace koshur::manifest
