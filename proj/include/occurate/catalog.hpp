#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace occurate::catalog {

struct SpeciesEntry {
    int id = 0;
    std::string name;
    std::string group;
};

/**
 * Ordered species identities. Ids are contiguous 0..n-1 and equal each
 * entry's position; names are unique; group tags partition the catalog.
 */
class SpeciesCatalog {
public:
    SpeciesCatalog() = default;
    explicit SpeciesCatalog(std::vector<SpeciesEntry> entries);

    int size() const { return static_cast<int>(entries_.size()); }
    const std::vector<SpeciesEntry>& entries() const { return entries_; }
    const SpeciesEntry& entry(int id) const { return entries_[static_cast<size_t>(id)]; }

    bool has_name(const std::string& name) const { return by_name_.count(name) > 0; }
    int index_of(const std::string& name) const;  // errors on unknown name

    bool has_group(const std::string& group) const;
    std::vector<int> group_indices(const std::string& group) const;  // errors on unknown tag
    std::vector<std::string> group_tags() const;                      // in first-appearance order

    nlohmann::json to_json() const;
    static SpeciesCatalog from_json(const nlohmann::json& j);
    static SpeciesCatalog load(const std::string& path);
    void save(const std::string& path) const;

private:
    std::vector<SpeciesEntry> entries_;
    std::map<std::string, int> by_name_;
};

struct ChecklistRecord {
    std::string hotspot_id;
    double lat = 0.0;
    double lon = 0.0;
    bool complete = false;
    std::vector<std::string> species;  // names as reported
};

/**
 * Per-species encounter rates with an availability mask. Rates are computed
 * in float64; they are narrowed to float32 only on disk.
 */
struct EncounterVector {
    std::vector<double> rates;
    std::vector<uint8_t> available;
};

// Reads `hotspot_id,lat,lon,complete,species_list` rows; species_list is
// `;`-separated. Rows with complete=0 are kept (callers filter).
std::vector<ChecklistRecord> read_checklists_csv(const std::string& path);

// Count of complete checklists reporting each catalog species.
std::vector<int64_t> occurrence_counts(const std::vector<ChecklistRecord>& checklists,
                                       const SpeciesCatalog& catalog);

struct HotspotRates {
    std::string hotspot_id;
    EncounterVector vec;
    int64_t n_checklists = 0;
};

/**
 * rate_s = (#complete checklists reporting s) / (#complete checklists at the
 * hotspot). Hotspots keep their first-appearance order; a hotspot with zero
 * complete checklists is dropped with a warning on stderr. Availability is
 * set for every catalog species in `covered_groups` (all groups if empty).
 * Species not in the catalog still count toward the denominator.
 */
std::vector<HotspotRates> compute_encounter_rates(const std::vector<ChecklistRecord>& checklists,
                                                  const SpeciesCatalog& catalog,
                                                  const std::vector<std::string>& covered_groups = {});

/**
 * Keeps species with count >= min_occurrences, re-indexed contiguously in
 * the original order. Errors if nothing passes.
 */
SpeciesCatalog filter_species(const SpeciesCatalog& catalog, const std::vector<int64_t>& counts,
                              int64_t min_occurrences);

// Sub-vector (rates and availability) over the group's indices, catalog order.
EncounterVector restrict(const EncounterVector& vec, const std::string& group,
                         const SpeciesCatalog& catalog);

} // namespace occurate::catalog
