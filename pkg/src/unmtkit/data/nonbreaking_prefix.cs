# Czech nonbreaking prefixes (also used for Upper Sorbian, which has no rule file of its own).
A
B
C
D
E
F
G
H
I
J
K
L
M
N
O
P
Q
R
S
T
U
V
W
X
Y
Z
a
b
c
d
e
f
g
h
i
j
k
l
m
n
o
p
q
r
s
t
u
v
w
x
y
z
# Titles and common abbreviations
Bc
BcA
Ing
Mgr
MUDr
JUDr
PhDr
RNDr
Doc
Dr
Prof
atd
apod
tzv
např
resp
tj
str
čís
sv
kap
obr
tab
