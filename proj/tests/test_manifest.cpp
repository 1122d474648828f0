#include <catch2/catch_amalgamated.hpp>

#include <map>
#include <string>

#include "koshur/manifest.hpp"

using namespace koshur;
using Catch::Approx;

namespace {

const std::string kHeader = "id\taudio_path\ttext\tspeaker\tsource\tsplit\n";

std::string row(const std::string& id, const std::string& split, const std::string& source = "rasa") {
    return id + "\taudio/" + id + ".wav\tکٲشُر متن\tspk1\t" + source + "\t" + split + "\n";
}

}  // namespace

TEST_CASE("manifest parsing accepts valid files") {
    std::string content = kHeader + row("u1", "train") + row("u2", "valid") + row("u3", "test");
    auto entries = manifest::parse_manifest(content);
    REQUIRE(entries.size() == 3);
    REQUIRE(entries[0].id == "u1");
    REQUIRE(entries[0].audio_path == "audio/u1.wav");
    REQUIRE(entries[0].text == "کٲشُر متن");
    REQUIRE(entries[0].speaker == "spk1");
    REQUIRE(entries[0].source == manifest::Source::Rasa);
    REQUIRE(entries[0].split == manifest::Split::Train);
    REQUIRE(entries[0].line == 2);
    REQUIRE(entries[2].split == manifest::Split::Test);

    // Telephone-sourced training data is fine; CRLF and case are tolerated.
    std::string crlf = kHeader + "u1\ta.wav\tmetn\tspk\tIVR\tTRAIN\r\n";
    auto ivr = manifest::parse_manifest(crlf);
    REQUIRE(ivr.size() == 1);
    REQUIRE(ivr[0].source == manifest::Source::Ivr);

    // Blank lines are skipped.
    REQUIRE(manifest::parse_manifest(kHeader + "\n" + row("u9", "train") + "\n").size() == 1);
}

TEST_CASE("manifest parsing rejects malformed input") {
    REQUIRE_THROWS_AS(manifest::parse_manifest(""), manifest::BadManifest);
    REQUIRE_THROWS_AS(manifest::parse_manifest("id\taudio\n"), manifest::BadManifest);
    REQUIRE_THROWS_AS(manifest::parse_manifest(kHeader + "u1\tonly\tthree\n"), manifest::BadManifest);
    REQUIRE_THROWS_AS(manifest::parse_manifest(kHeader + row("u1", "dev")), manifest::BadSplit);
    REQUIRE_THROWS_AS(manifest::parse_manifest(kHeader + row("u1", "train", "youtube")), manifest::BadManifest);
    REQUIRE_THROWS_AS(manifest::parse_manifest(kHeader + "\tp\tt\ts\trasa\ttrain\n"), manifest::BadManifest);

    try {
        manifest::parse_manifest(kHeader + row("u1", "train") + row("u2", "train") + row("u1", "test"));
        FAIL("expected DuplicateId");
    } catch (const manifest::DuplicateId& e) {
        std::string msg = e.what();
        REQUIRE(msg.find("u1") != std::string::npos);
        REQUIRE(msg.find("2") != std::string::npos);
        REQUIRE(msg.find("4") != std::string::npos);
    }
}

TEST_CASE("evaluation splits must be studio-sourced") {
    REQUIRE_THROWS_AS(manifest::parse_manifest(kHeader + row("u1", "test", "ivr")), manifest::NonRasaEval);
    REQUIRE_THROWS_AS(manifest::parse_manifest(kHeader + row("u1", "valid", "ivr")), manifest::NonRasaEval);
    REQUIRE_NOTHROW(manifest::parse_manifest(kHeader + row("u1", "train", "ivr")));
    try {
        manifest::parse_manifest(kHeader + row("ok", "train") + row("bad", "valid", "ivr"));
        FAIL("expected NonRasaEval");
    } catch (const manifest::NonRasaEval& e) {
        std::string msg = e.what();
        REQUIRE(msg.find("bad") != std::string::npos);
        REQUIRE(msg.find("3") != std::string::npos);
    }
}

TEST_CASE("manifest formatting round-trips") {
    std::string content = kHeader + row("u1", "train", "ivr") + row("u2", "valid") + row("u3", "test");
    auto entries = manifest::parse_manifest(content);
    std::string formatted = manifest::format_manifest(entries);
    auto again = manifest::parse_manifest(formatted);
    REQUIRE(again.size() == entries.size());
    for (std::size_t i = 0; i < entries.size(); ++i) {
        REQUIRE(again[i].id == entries[i].id);
        REQUIRE(again[i].audio_path == entries[i].audio_path);
        REQUIRE(again[i].text == entries[i].text);
        REQUIRE(again[i].speaker == entries[i].speaker);
        REQUIRE(again[i].source == entries[i].source);
        REQUIRE(again[i].split == entries[i].split);
    }
}

TEST_CASE("duration stats aggregate per source and split") {
    auto entries = manifest::parse_manifest(kHeader + row("u1", "train") + row("u2", "train") +
                                            row("u3", "train", "ivr") + row("u4", "valid") + row("u5", "test"));
    std::map<std::string, double> durations{
        {"u1", 1.0}, {"u2", 1.0}, {"u3", 7.2}, {"u4", 3.6}, {"u5", 36.0}};
    manifest::StatsTable t = manifest::manifest_stats(entries, durations);

    const int rasa = static_cast<int>(manifest::Source::Rasa);
    const int ivr = static_cast<int>(manifest::Source::Ivr);
    const int train = static_cast<int>(manifest::Split::Train);
    const int valid = static_cast<int>(manifest::Split::Valid);
    const int test = static_cast<int>(manifest::Split::Test);

    REQUIRE(t.cell[rasa][train].utterances == 2);
    REQUIRE(t.cell[rasa][train].hours == Approx(2.0 / 3600.0));
    REQUIRE(t.cell[ivr][train].hours == Approx(0.002));
    REQUIRE(t.cell[ivr][valid].utterances == 0);
    REQUIRE(t.cell[rasa][test].hours == Approx(0.01));
    REQUIRE(t.total.utterances == 5);

    double cells = 0.0;
    int utts = 0;
    for (int s = 0; s < 2; ++s)
        for (int p = 0; p < 3; ++p) {
            cells += t.cell[s][p].hours;
            utts += t.cell[s][p].utterances;
        }
    REQUIRE(t.total.hours == Approx(cells).margin(1e-12));
    REQUIRE(t.total.utterances == utts);
    REQUIRE(t.source_total[rasa].hours + t.source_total[ivr].hours == Approx(t.total.hours).margin(1e-12));
    REQUIRE(t.split_total[train].utterances == 3);

    manifest::StatsTable empty = manifest::manifest_stats({}, {});
    REQUIRE(empty.total.utterances == 0);
    REQUIRE(empty.total.hours == 0.0);

    REQUIRE_THROWS_AS(manifest::manifest_stats(entries, {}), manifest::UnreadableAudio);

    std::string table = manifest::format_stats(t);
    REQUIRE(table.find("source\ttrain\tvalid\ttest\ttotal") == 0);
    REQUIRE(table.find("0.01 h (1)") != std::string::npos);
    REQUIRE(table.find("(5)") != std::string::npos);
}
