#pragma once

#include <map>
#include <string>
#include <vector>

#include "fm/common.hpp"

namespace fm {

enum class Category {
    Arithmetic, Statistical, TimeSeries, CrossSectional, Smoothing, Regression, Logical,
};

inline const char* category_name(Category c) {
    static const char* names[] = {"arithmetic", "statistical", "time-series",
                                  "cross-sectional", "smoothing", "regression", "logical"};
    return names[static_cast<int>(c)];
}

enum class ValueKind { Numeric, Logical };

struct OpInfo {
    std::string name;
    Category category;
    std::vector<ValueKind> arg_kinds;  // expression children
    ValueKind out_kind;
    int n_iparams = 0;   // trailing integer parameters (windows / lags)
    int min_iparam = 1;  // 2 for statistics requiring variance
};

// The operator registry Omega. Fixed inventory: every operator of the
// seven categories plus Corr (rolling correlation).
class OperatorRegistry {
public:
    static const OperatorRegistry& instance() {
        static OperatorRegistry reg;
        return reg;
    }

    const OpInfo* find(const std::string& name) const {
        auto it = by_name_.find(name);
        return it == by_name_.end() ? nullptr : &it->second;
    }

    const std::map<std::string, OpInfo>& entries() const { return by_name_; }

private:
    std::map<std::string, OpInfo> by_name_;

    void add(std::string name, Category cat, int nargs, ValueKind out,
             int n_iparams = 0, int min_iparam = 1,
             ValueKind arg_kind = ValueKind::Numeric) {
        OpInfo info;
        info.name = name;
        info.category = cat;
        info.arg_kinds.assign(static_cast<std::size_t>(nargs), arg_kind);
        info.out_kind = out;
        info.n_iparams = n_iparams;
        info.min_iparam = min_iparam;
        by_name_.emplace(std::move(name), std::move(info));
    }

    OperatorRegistry() {
        using C = Category;
        using K = ValueKind;
        // Arithmetic
        for (const char* n : {"Add", "Sub", "Mul", "Div", "Power", "SignedPower"})
            add(n, C::Arithmetic, 2, K::Numeric);
        for (const char* n : {"Neg", "Abs", "Log", "Inv", "Sqrt", "Square", "Exp", "Tanh"})
            add(n, C::Arithmetic, 1, K::Numeric);
        // Statistical (rolling)
        for (const char* n : {"Mean", "Med", "Sum", "Product"})
            add(n, C::Statistical, 1, K::Numeric, 1, 1);
        for (const char* n : {"Std", "Var", "Skew", "Kurt"})
            add(n, C::Statistical, 1, K::Numeric, 1, 2);
        // Rolling correlation; required by the price-volume interaction family.
        add("Corr", C::Statistical, 2, K::Numeric, 1, 2);
        // Time-series
        for (const char* n : {"Delay", "Delta"})
            add(n, C::TimeSeries, 1, K::Numeric, 1, 1);
        for (const char* n : {"TsRank", "TsMax", "TsMin", "TsArgMax", "TsArgMin", "TsDecay"})
            add(n, C::TimeSeries, 1, K::Numeric, 1, 1);
        // Cross-sectional
        add("CsRank", C::CrossSectional, 1, K::Numeric);
        add("Scale", C::CrossSectional, 1, K::Numeric);
        // Smoothing
        for (const char* n : {"SMA", "EMA", "WMA"})
            add(n, C::Smoothing, 1, K::Numeric, 1, 1);
        // Regression (OLS against the window's time index)
        for (const char* n : {"Slope", "Rsquare", "Resi"})
            add(n, C::Regression, 1, K::Numeric, 1, 2);
        // Logical
        for (const char* n : {"Greater", "Less", "GreaterEqual", "LessEqual", "Eq", "Ne"})
            add(n, C::Logical, 2, K::Logical);
        for (const char* n : {"And", "Or"})
            add(n, C::Logical, 2, K::Logical, 0, 1, K::Logical);
        {
            OpInfo info;
            info.name = "IfElse";
            info.category = C::Logical;
            info.arg_kinds = {K::Logical, K::Numeric, K::Numeric};
            info.out_kind = K::Numeric;
            by_name_.emplace("IfElse", std::move(info));
        }
    }
};

// Commutative roots: child order does not affect the pattern signature.
inline bool is_commutative(const std::string& op) {
    return op == "Add" || op == "Mul" || op == "And" || op == "Or";
}

}  // namespace fm
