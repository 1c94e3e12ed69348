#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "aggdet/errors.hpp"
#include "aggdet/linalg.hpp"

namespace aggdet {

enum class Split { base, novel };

inline const char* to_string(Split s) noexcept { return s == Split::base ? "base" : "novel"; }

inline Split parse_split(const std::string& s) {
    if (s == "base") return Split::base;
    if (s == "novel") return Split::novel;
    throw ContractError("unknown split '" + s + "'");
}

struct ClassEntry {
    int id = 0;
    std::string name;
    Split split = Split::base;
    Vector text;
};

/// Ordered set of classes with their text embeddings. The position of a class
/// in the catalog is its score column everywhere downstream.
class ClassCatalog {
public:
    ClassCatalog() = default;

    ClassCatalog(std::vector<ClassEntry> classes, bool normalize) : classes_(std::move(classes)) {
        if (classes_.empty()) throw ContractError("ClassCatalog: no classes");
        // A zero dimension is allowed for label-only catalogs used in evaluation.
        dim_ = classes_.front().text.size();
        bool any_base = false;
        for (std::size_t c = 0; c < classes_.size(); ++c) {
            auto& e = classes_[c];
            if (e.text.size() != dim_) {
                throw ContractError("ClassCatalog: class " + std::to_string(e.id) + " has dimension " +
                                    std::to_string(e.text.size()) + ", expected " + std::to_string(dim_));
            }
            if (!all_finite(e.text)) {
                throw ContractError("ClassCatalog: class " + std::to_string(e.id) + " has a non-finite embedding");
            }
            if (!index_.emplace(e.id, c).second) {
                throw ContractError("ClassCatalog: duplicate class id " + std::to_string(e.id));
            }
            if (normalize) normalize_in_place(e.text);
            if (e.split == Split::base) {
                any_base = true;
                base_.push_back(c);
            } else {
                novel_.push_back(c);
            }
        }
        if (!any_base) throw ContractError("ClassCatalog: at least one base class is required");
    }

    std::size_t size() const noexcept { return classes_.size(); }
    std::size_t dim() const noexcept { return dim_; }
    const ClassEntry& operator[](std::size_t column) const { return classes_.at(column); }
    const std::vector<ClassEntry>& classes() const noexcept { return classes_; }

    const std::vector<std::size_t>& base_columns() const noexcept { return base_; }
    const std::vector<std::size_t>& novel_columns() const noexcept { return novel_; }
    bool is_novel(std::size_t column) const { return classes_.at(column).split == Split::novel; }

    std::optional<std::size_t> column_of(int class_id) const {
        auto it = index_.find(class_id);
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

    std::size_t require_column(int class_id) const {
        auto col = column_of(class_id);
        if (!col) throw ContractError("unknown class id " + std::to_string(class_id));
        return *col;
    }

private:
    std::vector<ClassEntry> classes_;
    std::size_t dim_ = 0;
    std::vector<std::size_t> base_;
    std::vector<std::size_t> novel_;
    std::unordered_map<int, std::size_t> index_;
};

}  // namespace aggdet
