#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <memory>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "fm/common.hpp"
#include "fm/panel.hpp"
#include "fm/registry.hpp"

namespace fm {

// A factor expression tree. Leaves are `$field` references or real
// constants; internal nodes are registry operators with trailing integer
// window/lag parameters.
struct Expr;
using ExprPtr = std::shared_ptr<const Expr>;

struct Expr {
    enum class Kind { Field, Const, Call };
    Kind kind = Kind::Const;
    FieldId field = FieldId::Close;  // Kind::Field
    double value = 0.0;              // Kind::Const
    std::string op;                  // Kind::Call
    std::vector<ExprPtr> args;
    std::vector<int> iparams;

    static ExprPtr make_field(FieldId f) {
        auto e = std::make_shared<Expr>();
        e->kind = Kind::Field;
        e->field = f;
        return e;
    }
    static ExprPtr make_const(double v) {
        auto e = std::make_shared<Expr>();
        e->kind = Kind::Const;
        e->value = v;
        return e;
    }
    static ExprPtr make_call(std::string op, std::vector<ExprPtr> args,
                             std::vector<int> iparams = {}) {
        auto e = std::make_shared<Expr>();
        e->kind = Kind::Call;
        e->op = std::move(op);
        e->args = std::move(args);
        e->iparams = std::move(iparams);
        return e;
    }
};

inline bool expr_equal(const Expr& a, const Expr& b) {
    if (a.kind != b.kind) return false;
    switch (a.kind) {
        case Expr::Kind::Field: return a.field == b.field;
        case Expr::Kind::Const: return a.value == b.value;
        case Expr::Kind::Call:
            if (a.op != b.op || a.iparams != b.iparams ||
                a.args.size() != b.args.size())
                return false;
            for (std::size_t i = 0; i < a.args.size(); ++i)
                if (!expr_equal(*a.args[i], *b.args[i])) return false;
            return true;
    }
    return false;
}

inline int expr_depth(const Expr& e) {
    if (e.kind != Expr::Kind::Call) return 1;
    int d = 0;
    for (const auto& a : e.args) d = std::max(d, expr_depth(*a));
    return d + 1;
}

inline int expr_node_count(const Expr& e) {
    if (e.kind != Expr::Kind::Call) return 1;
    int n = 1;
    for (const auto& a : e.args) n += expr_node_count(*a);
    return n;
}

inline void collect_fields(const Expr& e, std::set<FieldId>& out) {
    if (e.kind == Expr::Kind::Field) out.insert(e.field);
    for (const auto& a : e.args) collect_fields(*a, out);
}

// Type-checks a tree against the registry. Returns the value kind at the
// root; throws EvalError on any violation.
inline ValueKind validate(const Expr& e,
                          const OperatorRegistry& reg = OperatorRegistry::instance()) {
    if (e.kind != Expr::Kind::Call) return ValueKind::Numeric;
    const OpInfo* info = reg.find(e.op);
    if (!info) throw EvalError("unknown operator: " + e.op);
    if (e.args.size() != info->arg_kinds.size())
        throw EvalError("arity mismatch for " + e.op);
    if (static_cast<int>(e.iparams.size()) != info->n_iparams)
        throw EvalError("parameter count mismatch for " + e.op);
    for (int w : e.iparams)
        if (w < info->min_iparam)
            throw EvalError("window parameter too small for " + e.op);
    for (std::size_t i = 0; i < e.args.size(); ++i) {
        ValueKind k = validate(*e.args[i], reg);
        if (k != info->arg_kinds[i])
            throw EvalError(std::string("type violation in ") + e.op + ": argument " +
                            std::to_string(i + 1) +
                            (info->arg_kinds[i] == ValueKind::Logical
                                 ? " must be logical"
                                 : " must be numeric"));
    }
    return info->out_kind;
}

// ---------------------------------------------------------------------------
// Parser. Grammar: expr := $field | number | Name(expr {, expr} {, int})
// Whitespace-insensitive, case-sensitive operator names, errors carry a
// character offset.
// ---------------------------------------------------------------------------

namespace detail {

class Parser {
public:
    Parser(std::string_view text, const OperatorRegistry& reg)
        : text_(text), reg_(reg) {}

    ExprPtr parse() {
        ExprPtr e = parse_expr();
        skip_ws();
        if (pos_ != text_.size())
            throw ParseError("unexpected trailing input", pos_);
        return e;
    }

private:
    std::string_view text_;
    const OperatorRegistry& reg_;
    std::size_t pos_ = 0;

    void skip_ws() {
        while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_])))
            ++pos_;
    }

    char peek() {
        skip_ws();
        return pos_ < text_.size() ? text_[pos_] : '\0';
    }

    [[noreturn]] void fail(const std::string& msg) { throw ParseError(msg, pos_); }

    ExprPtr parse_expr() {
        skip_ws();
        char c = peek();
        if (c == '$') return parse_field();
        if (c == '-' || c == '+' || c == '.' || std::isdigit(static_cast<unsigned char>(c)))
            return parse_number();
        if (std::isalpha(static_cast<unsigned char>(c))) return parse_call();
        if (c == '\0') fail("unexpected end of input");
        fail(std::string("unexpected character '") + c + "'");
    }

    ExprPtr parse_field() {
        std::size_t start = pos_;
        ++pos_;  // '$'
        std::size_t b = pos_;
        while (pos_ < text_.size() &&
               (std::isalnum(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '_'))
            ++pos_;
        std::string_view name = text_.substr(b, pos_ - b);
        FieldId f;
        if (!field_from_name(name, f)) {
            pos_ = start;
            fail("unknown field: $" + std::string(name));
        }
        return Expr::make_field(f);
    }

    ExprPtr parse_number() {
        std::size_t start = pos_;
        double v;
        auto res = std::from_chars(text_.data() + pos_, text_.data() + text_.size(), v);
        if (res.ec != std::errc()) fail("malformed number");
        pos_ = static_cast<std::size_t>(res.ptr - text_.data());
        if (pos_ < text_.size() &&
            (std::isalnum(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '.')) {
            pos_ = start;
            fail("malformed number");
        }
        return Expr::make_const(v);
    }

    ExprPtr parse_call() {
        std::size_t name_off = pos_;
        std::size_t b = pos_;
        while (pos_ < text_.size() &&
               (std::isalnum(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '_'))
            ++pos_;
        std::string name(text_.substr(b, pos_ - b));
        const OpInfo* info = reg_.find(name);
        if (!info) {
            pos_ = name_off;
            fail("unknown operator: " + name);
        }
        if (peek() != '(') fail("expected '(' after " + name);
        ++pos_;

        struct Item {
            ExprPtr expr;
            std::size_t offset;
        };
        std::vector<Item> items;
        if (peek() != ')') {
            while (true) {
                skip_ws();
                items.push_back({nullptr, pos_});
                items.back().expr = parse_expr();
                char c = peek();
                if (c == ',') { ++pos_; continue; }
                if (c == ')') break;
                if (c == '\0') fail("unbalanced parentheses in " + name);
                fail("expected ',' or ')'");
            }
        }
        ++pos_;  // ')'

        std::size_t want = info->arg_kinds.size() + static_cast<std::size_t>(info->n_iparams);
        if (items.size() != want)
            throw ParseError("arity mismatch for " + name + ": expected " +
                                 std::to_string(want) + " arguments, got " +
                                 std::to_string(items.size()), name_off);

        std::vector<ExprPtr> args;
        std::vector<int> iparams;
        for (std::size_t i = 0; i < info->arg_kinds.size(); ++i)
            args.push_back(items[i].expr);
        for (std::size_t i = info->arg_kinds.size(); i < items.size(); ++i) {
            const Expr& e = *items[i].expr;
            if (e.kind != Expr::Kind::Const || e.value != static_cast<double>(static_cast<int>(e.value)))
                throw ParseError("window parameter of " + name + " must be an integer literal",
                                 items[i].offset);
            int w = static_cast<int>(e.value);
            if (w < info->min_iparam)
                throw ParseError("window parameter of " + name + " must be >= " +
                                     std::to_string(info->min_iparam), items[i].offset);
            iparams.push_back(w);
        }

        ExprPtr call = Expr::make_call(name, std::move(args), std::move(iparams));
        // Type-check this level immediately so the error carries an offset.
        for (std::size_t i = 0; i < info->arg_kinds.size(); ++i) {
            ValueKind k = validate(*call->args[i], reg_);
            if (k != info->arg_kinds[i])
                throw ParseError("type violation in " + name + ": argument " +
                                     std::to_string(i + 1) +
                                     (info->arg_kinds[i] == ValueKind::Logical
                                          ? " must be logical"
                                          : " must be numeric"),
                                 items[i].offset);
        }
        return call;
    }
};

inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

}  // namespace detail

inline ExprPtr parse(std::string_view text,
                     const OperatorRegistry& reg = OperatorRegistry::instance()) {
    detail::Parser p(text, reg);
    ExprPtr e = p.parse();
    validate(*e, reg);
    return e;
}

// Canonical single-line rendering; parse(format(e)) is structurally
// identical to e, and format is a fixed point after one parse.
inline std::string format(const Expr& e) {
    switch (e.kind) {
        case Expr::Kind::Field:
            return std::string("$") + field_name(e.field);
        case Expr::Kind::Const:
            return detail::format_double(e.value);
        case Expr::Kind::Call: {
            std::string out = e.op;
            out += '(';
            bool first = true;
            for (const auto& a : e.args) {
                if (!first) out += ", ";
                first = false;
                out += format(*a);
            }
            for (int w : e.iparams) {
                if (!first) out += ", ";
                first = false;
                out += std::to_string(w);
            }
            out += ')';
            return out;
        }
    }
    return {};
}

inline std::string format(const ExprPtr& e) { return format(*e); }

// ---------------------------------------------------------------------------
// Pattern signature: the structural fingerprint used by the experience
// memory. Covers the root operator, the (category, name) multiset of the
// top two tree levels, and the set of referenced fields.
// ---------------------------------------------------------------------------

struct PatternSignature {
    std::string root;                                        // root node label
    std::vector<std::pair<std::string, std::string>> ops;    // sorted (category, name)
    std::vector<std::string> fields;                         // sorted unique

    std::string key() const {
        std::string out = "root=" + root + "|ops=";
        bool first = true;
        for (const auto& [c, n] : ops) {
            if (!first) out += ',';
            first = false;
            out += c;
            out += ':';
            out += n;
        }
        out += "|fields=";
        first = true;
        for (const auto& f : fields) {
            if (!first) out += ',';
            first = false;
            out += f;
        }
        return out;
    }

    bool operator==(const PatternSignature& o) const {
        return root == o.root && ops == o.ops && fields == o.fields;
    }
};

inline PatternSignature signature(const Expr& e,
                                  const OperatorRegistry& reg = OperatorRegistry::instance()) {
    PatternSignature sig;
    if (e.kind == Expr::Kind::Call) {
        sig.root = e.op;
        const OpInfo* root_info = reg.find(e.op);
        sig.ops.emplace_back(category_name(root_info->category), e.op);
        for (const auto& a : e.args) {
            if (a->kind != Expr::Kind::Call) continue;
            const OpInfo* info = reg.find(a->op);
            sig.ops.emplace_back(category_name(info->category), a->op);
        }
        std::sort(sig.ops.begin(), sig.ops.end());
    } else if (e.kind == Expr::Kind::Field) {
        sig.root = std::string("$") + field_name(e.field);
    } else {
        sig.root = "const";
    }
    std::set<FieldId> fs;
    collect_fields(e, fs);
    for (FieldId f : fs) sig.fields.emplace_back(field_name(f));
    return sig;
}

inline std::string signature_key(const Expr& e) { return signature(e).key(); }

}  // namespace fm
