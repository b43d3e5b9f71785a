#include "occurate/catalog.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "occurate/error.hpp"

namespace occurate::catalog {

SpeciesCatalog::SpeciesCatalog(std::vector<SpeciesEntry> entries) : entries_(std::move(entries)) {
    for (size_t i = 0; i < entries_.size(); ++i) {
        if (entries_[i].id != static_cast<int>(i))
            data_error("catalog ids must be contiguous 0..n-1; entry " + std::to_string(i) +
                       " has id " + std::to_string(entries_[i].id));
        if (!by_name_.emplace(entries_[i].name, static_cast<int>(i)).second)
            data_error("duplicate species name in catalog: " + entries_[i].name);
    }
}

int SpeciesCatalog::index_of(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) data_error("unknown species name: " + name);
    return it->second;
}

bool SpeciesCatalog::has_group(const std::string& group) const {
    for (const auto& e : entries_)
        if (e.group == group) return true;
    return false;
}

std::vector<int> SpeciesCatalog::group_indices(const std::string& group) const {
    std::vector<int> out;
    for (const auto& e : entries_)
        if (e.group == group) out.push_back(e.id);
    if (out.empty()) data_error("unknown group tag: " + group);
    return out;
}

std::vector<std::string> SpeciesCatalog::group_tags() const {
    std::vector<std::string> tags;
    for (const auto& e : entries_)
        if (std::find(tags.begin(), tags.end(), e.group) == tags.end()) tags.push_back(e.group);
    return tags;
}

nlohmann::json SpeciesCatalog::to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& e : entries_)
        arr.push_back({{"id", e.id}, {"name", e.name}, {"group", e.group}});
    return arr;
}

SpeciesCatalog SpeciesCatalog::from_json(const nlohmann::json& j) {
    std::vector<SpeciesEntry> entries;
    for (const auto& item : j)
        entries.push_back({item.at("id").get<int>(), item.at("name").get<std::string>(),
                           item.at("group").get<std::string>()});
    return SpeciesCatalog(std::move(entries));
}

SpeciesCatalog SpeciesCatalog::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) data_error("cannot open catalog file: " + path);
    nlohmann::json j = nlohmann::json::parse(is, nullptr, false);
    if (j.is_discarded()) data_error("invalid JSON in catalog file: " + path);
    return from_json(j);
}

void SpeciesCatalog::save(const std::string& path) const {
    std::ofstream os(path);
    if (!os) data_error("cannot open catalog file for writing: " + path);
    os << to_json().dump(2) << "\n";
}

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

std::string strip(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

} // namespace

std::vector<ChecklistRecord> read_checklists_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) data_error("cannot open checklists file: " + path);
    std::string line;
    if (!std::getline(is, line)) data_error("empty checklists file: " + path);
    if (strip(line) != "hotspot_id,lat,lon,complete,species_list")
        data_error("checklists file " + path +
                   ": expected header 'hotspot_id,lat,lon,complete,species_list'");
    std::vector<ChecklistRecord> out;
    size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (strip(line).empty()) continue;
        auto cols = split(line, ',');
        if (cols.size() != 5)
            data_error(path + ":" + std::to_string(lineno) + ": expected 5 columns, got " +
                       std::to_string(cols.size()));
        ChecklistRecord rec;
        rec.hotspot_id = strip(cols[0]);
        try {
            rec.lat = std::stod(cols[1]);
            rec.lon = std::stod(cols[2]);
        } catch (const std::exception&) {
            data_error(path + ":" + std::to_string(lineno) + ": invalid coordinates");
        }
        std::string flag = strip(cols[3]);
        rec.complete = flag == "1" || flag == "true";
        for (auto& sp : split(cols[4], ';')) {
            std::string name = strip(sp);
            if (!name.empty()) rec.species.push_back(name);
        }
        out.push_back(std::move(rec));
    }
    return out;
}

std::vector<int64_t> occurrence_counts(const std::vector<ChecklistRecord>& checklists,
                                       const SpeciesCatalog& catalog) {
    std::vector<int64_t> counts(static_cast<size_t>(catalog.size()), 0);
    for (const auto& rec : checklists) {
        if (!rec.complete) continue;
        std::set<int> seen;
        for (const auto& name : rec.species)
            if (catalog.has_name(name)) seen.insert(catalog.index_of(name));
        for (int id : seen) counts[static_cast<size_t>(id)]++;
    }
    return counts;
}

std::vector<HotspotRates> compute_encounter_rates(const std::vector<ChecklistRecord>& checklists,
                                                  const SpeciesCatalog& catalog,
                                                  const std::vector<std::string>& covered_groups) {
    const int n = catalog.size();
    std::vector<uint8_t> avail(static_cast<size_t>(n), 0);
    if (covered_groups.empty()) {
        std::fill(avail.begin(), avail.end(), 1);
    } else {
        for (const auto& tag : covered_groups)
            for (int id : catalog.group_indices(tag)) avail[static_cast<size_t>(id)] = 1;
    }

    // first-appearance order of hotspot ids
    std::vector<std::string> order;
    std::map<std::string, size_t> pos;
    struct Tally {
        int64_t total = 0;
        std::vector<int64_t> per_species;
    };
    std::vector<Tally> tallies;
    for (const auto& rec : checklists) {
        auto it = pos.find(rec.hotspot_id);
        if (it == pos.end()) {
            it = pos.emplace(rec.hotspot_id, order.size()).first;
            order.push_back(rec.hotspot_id);
            tallies.push_back(Tally{0, std::vector<int64_t>(static_cast<size_t>(n), 0)});
        }
        if (!rec.complete) continue;
        Tally& t = tallies[it->second];
        t.total++;
        std::set<int> seen;
        for (const auto& name : rec.species)
            if (catalog.has_name(name)) seen.insert(catalog.index_of(name));
        for (int id : seen) t.per_species[static_cast<size_t>(id)]++;
    }

    std::vector<HotspotRates> out;
    for (size_t i = 0; i < order.size(); ++i) {
        const Tally& t = tallies[i];
        if (t.total == 0) {
            std::cerr << "warning: hotspot " << order[i]
                      << " has no complete checklists; excluded from targets\n";
            continue;
        }
        HotspotRates hr;
        hr.hotspot_id = order[i];
        hr.n_checklists = t.total;
        hr.vec.rates.resize(static_cast<size_t>(n), 0.0);
        hr.vec.available = avail;
        for (int s = 0; s < n; ++s)
            hr.vec.rates[static_cast<size_t>(s)] =
                static_cast<double>(t.per_species[static_cast<size_t>(s)]) /
                static_cast<double>(t.total);
        out.push_back(std::move(hr));
    }
    return out;
}

SpeciesCatalog filter_species(const SpeciesCatalog& catalog, const std::vector<int64_t>& counts,
                              int64_t min_occurrences) {
    if (counts.size() != static_cast<size_t>(catalog.size()))
        data_error("filter_species: counts size " + std::to_string(counts.size()) +
                   " does not cover catalog of " + std::to_string(catalog.size()));
    std::vector<SpeciesEntry> kept;
    for (const auto& e : catalog.entries())
        if (counts[static_cast<size_t>(e.id)] >= min_occurrences)
            kept.push_back({static_cast<int>(kept.size()), e.name, e.group});
    if (kept.empty()) data_error("no species pass threshold " + std::to_string(min_occurrences));
    return SpeciesCatalog(std::move(kept));
}

EncounterVector restrict(const EncounterVector& vec, const std::string& group,
                         const SpeciesCatalog& catalog) {
    if (vec.rates.size() != static_cast<size_t>(catalog.size()))
        data_error("restrict: vector length " + std::to_string(vec.rates.size()) +
                   " does not match catalog of " + std::to_string(catalog.size()));
    auto idx = catalog.group_indices(group);
    EncounterVector out;
    out.rates.reserve(idx.size());
    out.available.reserve(idx.size());
    for (int id : idx) {
        out.rates.push_back(vec.rates[static_cast<size_t>(id)]);
        out.available.push_back(vec.available[static_cast<size_t>(id)]);
    }
    return out;
}

} // namespace occurate::catalog
